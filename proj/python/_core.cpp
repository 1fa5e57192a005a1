#include "tsdiff/config.hpp"
#include "tsdiff/dataset.hpp"
#include "tsdiff/errors.hpp"
#include "tsdiff/noisespace.hpp"
#include "tsdiff/rawproc.hpp"
#include "tsdiff/sampler.hpp"
#include "tsdiff/trainer.hpp"

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>

namespace py = pybind11;
using namespace tsdiff;

namespace {

using FloatArray = py::array_t<Scalar, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<Scalar>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor& t) {
    FloatArray out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

PackedRaw packed(const FloatArray& planes, const RawMeta& meta) {
    PackedRaw p{to_tensor(planes), meta};
    if (p.planes.rank() != 3 || p.planes.dim(0) != kPackedChannels)
        throw ShapeError("expected packed planes of shape (4, h, w), got " + to_string(p.planes.shape()));
    return p;
}

Route pick_route(const DenoiserModel& model, std::optional<std::size_t> camera) {
    if (camera) return Route::camera(*camera);
    if (model.mode() == DenoiserMode::pretrain) throw ModeError("pretrain checkpoints need camera=<index>");
    return Route::target();
}

StepLogger wrap_logger(const std::function<void(int, double)>& cb) {
    if (!cb) return {};
    return [cb](int it, const StepResult& r) {
        py::gil_scoped_acquire gil;
        cb(it, r.loss);
    };
}

std::vector<PackedRaw> as_corpus(const std::vector<FloatArray>& scenes) {
    std::vector<PackedRaw> out;
    for (const auto& s : scenes) out.push_back(packed(s, RawMeta{}));
    return out;
}

std::vector<AlignPair> as_pairs(const std::vector<std::tuple<FloatArray, FloatArray, double>>& pairs) {
    std::vector<AlignPair> out;
    for (const auto& [noisy, clean, ratio] : pairs) out.push_back({packed(noisy, RawMeta{}), packed(clean, RawMeta{}), ratio});
    return out;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Two-stage diffusion enhancement of low-light RAW images";

    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<ModeError>(m, "ModeError", PyExc_RuntimeError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    py::class_<RawMeta>(m, "RawMeta")
        .def(py::init<>())
        .def_property(
            "pattern", [](const RawMeta& r) { return std::string(to_string(r.pattern)); },
            [](RawMeta& r, const std::string& s) { r.pattern = parse_bayer_pattern(s); })
        .def_readwrite("black_level", &RawMeta::black_level)
        .def_readwrite("white_level", &RawMeta::white_level)
        .def_readwrite("exposure_ratio", &RawMeta::exposure_ratio)
        .def_readwrite("camera_id", &RawMeta::camera_id)
        .def("__repr__", [](const RawMeta& r) {
            return "RawMeta(pattern='" + std::string(to_string(r.pattern)) + "', ratio=" + std::to_string(r.exposure_ratio) +
                   ", camera='" + r.camera_id + "')";
        });

    m.def(
        "read_r4",
        [](const std::filesystem::path& path) {
            const PackedRaw p = pack(read_r4(path));
            return py::make_tuple(to_array(p.planes), p.meta);
        },
        py::arg("path"), "Read a .r4 file as (packed planes (4,h,w) in [0,1], RawMeta).");
    m.def(
        "write_r4",
        [](const std::filesystem::path& path, const FloatArray& planes, const RawMeta& meta) {
            write_r4(unpack(packed(planes, meta)), path);
        },
        py::arg("path"), py::arg("planes"), py::arg("meta") = RawMeta{});
    m.def(
        "generate_scene",
        [](std::size_t size, std::uint64_t seed) {
            Rng rng(seed);
            return to_array(pack(generate_scene(size, rng)).planes);
        },
        py::arg("size"), py::arg("seed"), "Procedural clean scene; size is the Bayer side length (divisible by 4).");
    m.def("build_condition", [](const FloatArray& planes) { return to_array(build_condition(to_tensor(planes))); });
    m.def("amplify", [](const FloatArray& planes, double ratio) { return to_array(amplify(to_tensor(planes), ratio)); });

    py::class_<NoiseParams>(m, "NoiseParams")
        .def(py::init<>())
        .def_readwrite("gain", &NoiseParams::gain)
        .def_readwrite("read_sigma", &NoiseParams::read_sigma)
        .def_readwrite("row_sigma", &NoiseParams::row_sigma)
        .def_readwrite("quant_step", &NoiseParams::quant_step)
        .def_readwrite("ratio", &NoiseParams::ratio);

    py::class_<NoiseSpace>(m, "NoiseSpace")
        .def_static("defaults", &NoiseSpace::defaults)
        .def_static("load", &NoiseSpace::load)
        .def_static("parse", &NoiseSpace::parse, py::arg("text"), py::arg("source") = "<string>")
        .def("to_text", &NoiseSpace::to_text)
        .def_readwrite("log_gain_min", &NoiseSpace::log_gain_min)
        .def_readwrite("log_gain_max", &NoiseSpace::log_gain_max)
        .def(
            "sample_params",
            [](const NoiseSpace& s, std::size_t cameras, std::size_t camera, std::uint64_t seed) {
                const auto cams = partition(s, cameras);
                if (camera < 1 || camera > cams.size()) throw py::index_error("camera index out of range");
                Rng rng(seed);
                return sample_params(cams[camera - 1], s, rng);
            },
            py::arg("cameras"), py::arg("camera"), py::arg("seed"));

    m.def(
        "synthesize",
        [](const FloatArray& clean, const NoiseParams& params, std::uint64_t seed) {
            Rng rng(seed);
            return to_array(synthesize(packed(clean, RawMeta{}), params, rng).planes);
        },
        py::arg("clean"), py::arg("params"), py::arg("seed"), "Unamplified noisy capture of clean planes.");

    m.def("psnr", [](const FloatArray& a, const FloatArray& b) { return psnr(to_tensor(a), to_tensor(b)); });
    m.def("ssim", [](const FloatArray& a, const FloatArray& b) { return ssim(to_tensor(a), to_tensor(b)); });
    m.def("color_error", [](const FloatArray& a, const FloatArray& b) { return color_error(to_tensor(a), to_tensor(b)); });

    py::class_<DiffusionSchedule>(m, "Schedule")
        .def_static("build", &DiffusionSchedule::build, py::arg("steps"), py::arg("alpha_first"), py::arg("alpha_last"),
                    py::arg("eta") = 0.0)
        .def("steps", &DiffusionSchedule::steps)
        .def("alpha", &DiffusionSchedule::alpha)
        .def("alpha_bar", &DiffusionSchedule::alpha_bar)
        .def("sigma", &DiffusionSchedule::sigma)
        .def("factor", &DiffusionSchedule::factor);

    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_static("parse", &RunConfig::parse, py::arg("text"), py::arg("source") = "<string>")
        .def_static("load", &RunConfig::load)
        .def("to_text", &RunConfig::to_text)
        .def("validate", &RunConfig::validate)
        .def("__eq__", [](const RunConfig& a, const RunConfig& b) { return a == b; });

    py::class_<CheckpointBundle>(m, "Checkpoint")
        .def_static("fresh", &fresh_bundle, py::arg("config"), py::arg("scene_size") = 0)
        .def_static("load", &load_checkpoint)
        .def("save", [](const CheckpointBundle& b, const std::filesystem::path& p) { save_checkpoint(b, p); })
        .def("to_bytes",
             [](const CheckpointBundle& b) {
                 const auto v = serialize_checkpoint(b);
                 return py::bytes(reinterpret_cast<const char*>(v.data()), v.size());
             })
        .def_property_readonly("mode", [](const CheckpointBundle& b) { return std::string(to_string(b.model.mode())); })
        .def_readonly("iteration", &CheckpointBundle::iteration)
        .def(
            "pretrain",
            [](CheckpointBundle& b, const std::vector<FloatArray>& scenes, const NoiseSpace& space,
               const std::function<void(int, double)>& on_step) {
                const auto corpus = as_corpus(scenes);
                py::gil_scoped_release release;
                run_pretraining(b, corpus, space, wrap_logger(on_step));
            },
            py::arg("scenes"), py::arg("space"), py::arg("on_step") = nullptr)
        .def("begin_aligning", [](CheckpointBundle& b) { begin_aligning(b); })
        .def(
            "align",
            [](CheckpointBundle& b, const std::vector<std::tuple<FloatArray, FloatArray, double>>& pairs,
               const std::function<void(int, double)>& on_step) {
                const auto data = as_pairs(pairs);
                py::gil_scoped_release release;
                run_aligning(b, data, wrap_logger(on_step));
            },
            py::arg("pairs"), py::arg("on_step") = nullptr, "pairs: [(noisy planes, clean planes, ratio), ...]")
        .def("reparameterize", [](CheckpointBundle& b) { reparameterize(b); })
        .def(
            "enhance",
            [](const CheckpointBundle& b, const FloatArray& noisy, double ratio, std::uint64_t seed,
               std::optional<std::size_t> camera, bool color_correction, double eta) {
                const PackedRaw in = packed(noisy, RawMeta{});
                const Route route = pick_route(b.model, camera);
                Rng rng(seed);
                Tensor out;
                {
                    py::gil_scoped_release release;
                    out = enhance(in, ratio, b.model, color_correction ? &b.cc : nullptr, b.schedule(eta), rng, route).planes;
                }
                return to_array(out);
            },
            py::arg("noisy"), py::arg("ratio"), py::arg("seed") = 0, py::arg("camera") = py::none(),
            py::arg("color_correction") = true, py::arg("eta") = 0.0)
        .def(
            "evaluate",
            [](const CheckpointBundle& b, const std::filesystem::path& manifest, std::uint64_t seed,
               std::optional<std::size_t> camera, bool color_correction) {
                EvalOptions opt;
                opt.seed = seed;
                opt.color_correction = color_correction;
                opt.route = pick_route(b.model, camera);
                const auto data = load_pairs(manifest);
                py::gil_scoped_release release;
                return format_report(evaluate(data, b.model, b.cc, b.schedule(), opt));
            },
            py::arg("manifest"), py::arg("seed") = 0, py::arg("camera") = py::none(), py::arg("color_correction") = true,
            "Report text with one line per image and a summary line.");
}
