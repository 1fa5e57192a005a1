// Checkpoint file layout (all integers little-endian):
//
//   "TSDIFF-CKPT\n"                      12-byte magic
//   u64 manifest_length, manifest bytes   sorted "key = value" lines
//   u64 tensor_count
//   per tensor: u32 name_length, name, u32 rank, rank x u32 extents,
//               product(extents) x f32 values
//
// The manifest carries schema_version, the model mode, every configuration
// value needed to rebuild the networks, the training state and Adam step
// counts; "config.*" keys echo the effective run configuration.

#include "tsdiff/errors.hpp"
#include "tsdiff/kvfile.hpp"
#include "tsdiff/trainer.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

namespace tsdiff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[] = "TSDIFF-CKPT\n";
constexpr std::size_t kMagicSize = sizeof(kMagic) - 1;

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::map<std::string, std::string> manifest_of(const CheckpointBundle& b) {
    std::map<std::string, std::string> m;
    auto put = [&](const std::string& k, const std::string& v) { m[k] = v; };
    auto num = [&](const std::string& k, double v) { m[k] = format_double(v); };
    auto cnt = [&](const std::string& k, std::uint64_t v) { m[k] = std::to_string(v); };

    cnt("schema_version", kCheckpointSchema);
    put("mode", std::string(to_string(b.model.mode())));
    cnt("frozen", b.model.convs_frozen() ? 1 : 0);
    cnt("iteration", static_cast<std::uint64_t>(b.iteration));
    cnt("scene_size", b.scene_size);
    cnt("schedule.steps", static_cast<std::uint64_t>(b.schedule_steps));
    num("schedule.alpha_first", b.alpha_first);
    num("schedule.alpha_last", b.alpha_last);

    const DenoiserConfig& d = b.model.config();
    cnt("denoiser.image_channels", d.image_channels);
    cnt("denoiser.cond_channels", d.cond_channels);
    cnt("denoiser.base_width", d.base_width);
    cnt("denoiser.time_dim", d.time_dim);
    cnt("denoiser.cameras", d.cameras);

    const ColorCorrectorConfig& c = b.cc.config();
    cnt("cc.channels", c.channels);
    cnt("cc.width", c.width);
    cnt("cc.cond_width", c.cond_width);
    cnt("cc.cond_layers", c.cond_layers);
    cnt("cc.cond_kernel", c.cond_kernel);
    cnt("cc.cond_stride", c.cond_stride);

    const TrainConfig& t = b.train;
    cnt("train.batch_size", t.batch_size);
    cnt("train.crop", t.crop);
    num("train.learning_rate", t.learning_rate);
    num("train.align_learning_rate", t.align_learning_rate);
    put("train.milestones", join_ints(t.milestones));
    num("train.beta1", t.beta1);
    num("train.beta2", t.beta2);
    num("train.adam_eps", t.adam_eps);
    num("train.lambda_img", t.lambda_img);
    cnt("train.pretrain_iterations", static_cast<std::uint64_t>(t.pretrain_iterations));
    cnt("train.align_iterations", static_cast<std::uint64_t>(t.align_iterations));
    cnt("train.seed", t.seed);
    cnt("train.prefetch", t.prefetch);

    num("adam.beta1", b.optimizer.beta1());
    num("adam.beta2", b.optimizer.beta2());
    num("adam.eps", b.optimizer.eps());
    for (const auto& [name, slot] : b.optimizer.slots()) cnt("adam.steps." + name, static_cast<std::uint64_t>(slot.steps));

    for (const auto& [k, v] : b.provenance) {
        if (v.find_first_of("\n#") != std::string::npos)
            throw std::invalid_argument("checkpoint: config value for '" + k + "' contains a newline or '#'");
        put("config." + k, v);
    }
    return m;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_tensor(std::vector<std::uint8_t>& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (Scalar v : t.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

    std::size_t offset() const noexcept { return pos_; }
    bool at_end() const noexcept { return pos_ == bytes_.size(); }

    [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
        throw DataError("checkpoint " + source_ + ": " + msg + " at byte offset " + std::to_string(at));
    }

    const std::uint8_t* take(std::size_t n, const char* what) {
        if (n > bytes_.size() - pos_)
            fail(std::string("truncated while reading ") + what + " (need " + std::to_string(n) + " bytes, " +
                     std::to_string(bytes_.size() - pos_) + " left)",
                 pos_);
        const std::uint8_t* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::uint32_t u32(const char* what) {
        const std::uint8_t* p = take(4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
        return v;
    }
    std::uint64_t u64(const char* what) {
        const std::uint8_t* p = take(8, what);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
        return v;
    }
    std::string str(std::size_t n, const char* what) {
        const std::uint8_t* p = take(n, what);
        return std::string(reinterpret_cast<const char*>(p), n);
    }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

std::vector<int> parse_ints(const KeyValueFile& kv, std::string_view key) {
    std::vector<int> out;
    const std::string& text = kv.get(key);
    if (text.empty()) return out;
    for (double v : kv.get_double_list(key)) out.push_back(static_cast<int>(v));
    return out;
}

} // namespace

std::vector<std::uint8_t> serialize_checkpoint(const CheckpointBundle& bundle) {
    std::string manifest;
    for (const auto& [k, v] : manifest_of(bundle)) manifest += k + " = " + v + "\n";

    std::map<std::string, const Tensor*> tensors;
    const auto dstate = bundle.model.state();
    const auto cstate = bundle.cc.state();
    for (const auto& [n, t] : dstate) tensors["denoiser." + n] = &t;
    for (const auto& [n, t] : cstate) tensors["cc." + n] = &t;
    for (const auto& [n, s] : bundle.optimizer.slots()) {
        tensors["adam.m." + n] = &s.m;
        tensors["adam.v." + n] = &s.v;
    }

    std::vector<std::uint8_t> out(kMagic, kMagic + kMagicSize);
    put_u64(out, manifest.size());
    out.insert(out.end(), manifest.begin(), manifest.end());
    put_u64(out, tensors.size());
    for (const auto& [name, t] : tensors) put_tensor(out, name, *t);
    return out;
}

CheckpointBundle deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source) {
    Reader in(bytes, source);
    if (in.str(kMagicSize, "magic") != std::string(kMagic, kMagicSize)) in.fail("bad magic (not a checkpoint)", 0);

    const std::size_t manifest_at = in.offset();
    const std::uint64_t manifest_len = in.u64("manifest length");
    if (manifest_len == 0) in.fail("empty manifest", manifest_at);
    const std::string manifest_text = in.str(manifest_len, "manifest");
    const KeyValueFile kv = KeyValueFile::parse(manifest_text, source + " manifest");
    if (kv.entries().empty()) in.fail("empty manifest", manifest_at);
    if (!kv.contains("schema_version")) in.fail("manifest lacks schema_version", manifest_at);
    if (kv.get_int("schema_version") != kCheckpointSchema)
        in.fail("unsupported schema_version " + kv.get("schema_version") + " (this build reads " +
                    std::to_string(kCheckpointSchema) + ")",
                manifest_at);

    auto sz = [&](std::string_view k) {
        const auto v = kv.get_int(k);
        if (v < 0) throw DataError(source + ": manifest key '" + std::string(k) + "' must be >= 0");
        return static_cast<std::size_t>(v);
    };

    std::map<std::string, Tensor> tensors;
    const std::size_t count_at = in.offset();
    const std::uint64_t count = in.u64("tensor count");
    if (count > bytes.size()) in.fail("implausible tensor count " + std::to_string(count), count_at);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::size_t entry_at = in.offset();
        const std::uint32_t name_len = in.u32("tensor name length");
        std::string name = in.str(name_len, "tensor name");
        const std::uint32_t rank = in.u32("tensor rank");
        if (rank == 0 || rank > 8) in.fail("tensor '" + name + "' has invalid rank " + std::to_string(rank), entry_at);
        Shape shape;
        std::uint64_t n = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            const std::uint32_t d = in.u32("tensor extent");
            if (d == 0) in.fail("tensor '" + name + "' has a zero extent", entry_at);
            shape.push_back(d);
            n *= d;
            if (n > bytes.size()) in.fail("tensor '" + name + "' is larger than the file", entry_at);
        }
        Tensor t(shape);
        for (std::uint64_t k = 0; k < n; ++k) t[k] = static_cast<Scalar>(std::bit_cast<float>(in.u32("tensor data")));
        if (!tensors.emplace(std::move(name), std::move(t)).second) in.fail("duplicate tensor", entry_at);
    }
    if (!in.at_end()) in.fail("trailing bytes after last tensor", in.offset());

    try {
        DenoiserConfig d;
        d.image_channels = sz("denoiser.image_channels");
        d.cond_channels = sz("denoiser.cond_channels");
        d.base_width = sz("denoiser.base_width");
        d.time_dim = sz("denoiser.time_dim");
        d.cameras = sz("denoiser.cameras");
        ColorCorrectorConfig c;
        c.channels = sz("cc.channels");
        c.width = sz("cc.width");
        c.cond_width = sz("cc.cond_width");
        c.cond_layers = sz("cc.cond_layers");
        c.cond_kernel = sz("cc.cond_kernel");
        c.cond_stride = sz("cc.cond_stride");
        const DenoiserMode mode = parse_denoiser_mode(kv.get("mode"));

        std::set<std::string> used;
        auto prefixed = [&](const std::string& prefix) {
            std::map<std::string, Tensor> out;
            for (const auto& [n, t] : tensors)
                if (n.rfind(prefix, 0) == 0) {
                    out.emplace(n, t);
                    used.insert(n);
                }
            return out;
        };
        CheckpointBundle b{DenoiserModel::from_state(d, mode, prefixed("denoiser."), "denoiser."),
                           ColorCorrector::from_state(c, prefixed("cc."), "cc."),
                           static_cast<int>(kv.get_int("schedule.steps")),
                           kv.get_double("schedule.alpha_first"),
                           kv.get_double("schedule.alpha_last"),
                           {},
                           sz("scene_size"),
                           static_cast<int>(kv.get_int("iteration")),
                           Adam(kv.get_double("adam.beta1"), kv.get_double("adam.beta2"), kv.get_double("adam.eps")),
                           {}};
        if (kv.get_int("frozen")) b.model.freeze_convs(true);
        b.schedule(); // validates the schedule parameters

        TrainConfig& t = b.train;
        t.batch_size = sz("train.batch_size");
        t.crop = sz("train.crop");
        t.learning_rate = kv.get_double("train.learning_rate");
        t.align_learning_rate = kv.get_double("train.align_learning_rate");
        t.milestones = parse_ints(kv, "train.milestones");
        t.beta1 = kv.get_double("train.beta1");
        t.beta2 = kv.get_double("train.beta2");
        t.adam_eps = kv.get_double("train.adam_eps");
        t.lambda_img = kv.get_double("train.lambda_img");
        t.pretrain_iterations = static_cast<int>(kv.get_int("train.pretrain_iterations"));
        t.align_iterations = static_cast<int>(kv.get_int("train.align_iterations"));
        t.seed = static_cast<std::uint64_t>(kv.get_int("train.seed"));
        t.prefetch = sz("train.prefetch");
        t.validate();

        std::map<std::string, const ad::Parameter*> params;
        for (const auto* p : b.model.parameters()) params[p->name()] = p;
        for (const auto* p : b.cc.parameters()) params[p->name()] = p;
        for (const auto& e : kv.entries()) {
            if (e.key.rfind("config.", 0) == 0) {
                b.provenance.emplace_back(e.key.substr(7), e.value);
                continue;
            }
            if (e.key.rfind("adam.steps.", 0) != 0) continue;
            const std::string name = e.key.substr(11);
            const auto it = params.find(name);
            const auto m = tensors.find("adam.m." + name), v = tensors.find("adam.v." + name);
            if (it == params.end() || m == tensors.end() || v == tensors.end())
                throw DataError(source + ": optimizer state for unknown parameter '" + name + "'");
            if (m->second.shape() != it->second->value().shape() || v->second.shape() != it->second->value().shape())
                throw DataError(source + ": optimizer state for '" + name + "' has the wrong shape");
            b.optimizer.slots()[name] = {m->second, v->second, kv.get_int(e.key)};
            used.insert(m->first);
            used.insert(v->first);
        }
        for (const auto& [n, tensor] : tensors)
            if (!used.count(n)) throw DataError(source + ": unexpected tensor '" + n + "'");
        return b;
    } catch (const std::invalid_argument& e) {
        throw DataError(source + ": invalid manifest: " + e.what());
    } catch (const ModeError& e) {
        throw DataError(source + ": inconsistent checkpoint: " + e.what());
    }
}

void save_checkpoint(const CheckpointBundle& bundle, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(bundle);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path).concat(".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("checkpoint: cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("checkpoint: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

CheckpointBundle load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes, path.string());
}

} // namespace tsdiff
