#include "../support/helpers.hpp"

#include "tsdiff/dataset.hpp"
#include "tsdiff/errors.hpp"
#include "tsdiff/trainer.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace tsdiff;
using namespace tsdiff::testing;

namespace {

CheckpointBundle tiny_bundle(std::uint64_t seed = 1) {
    DenoiserConfig dc;
    dc.base_width = 4;
    dc.time_dim = 8;
    dc.cameras = 2;
    ColorCorrectorConfig cc;
    cc.width = 4;
    cc.cond_width = 4;
    CheckpointBundle b{DenoiserModel(dc, seed), ColorCorrector(cc, seed + 1)};
    b.schedule_steps = 20;
    b.alpha_first = 0.9999;
    b.alpha_last = 0.9;
    b.train.batch_size = 2;
    b.train.crop = 16;
    b.train.pretrain_iterations = 6;
    b.train.align_iterations = 5;
    b.train.learning_rate = 5e-4;
    b.train.milestones = {3};
    b.train.seed = 9;
    return b;
}

std::vector<PackedRaw> tiny_corpus(std::size_t n = 4) {
    std::vector<PackedRaw> out;
    for (std::size_t k = 0; k < n; ++k) {
        Rng rng = Rng::stream(3, k);
        out.push_back(pack(generate_scene(40, rng)));
    }
    return out;
}

std::vector<AlignPair> tiny_pairs() {
    std::vector<AlignPair> out;
    const NoiseSpace space = NoiseSpace::defaults();
    const auto cams = partition(space, 1);
    for (std::size_t k = 0; k < 3; ++k) {
        Rng rng = Rng::stream(4, k);
        const PackedRaw clean = pack(generate_scene(40, rng));
        const NoiseParams p = sample_params(cams[0], space, rng);
        out.push_back({synthesize(clean, p, rng), clean, p.ratio});
    }
    return out;
}

} // namespace

TEST_CASE("learning rate halves at each milestone") {
    TrainConfig c;
    c.learning_rate = 1e-3;
    c.milestones = {10, 20, 25};
    CHECK(c.lr_at(0) == 1e-3);
    CHECK(c.lr_at(9) == 1e-3);
    CHECK(c.lr_at(10) == 5e-4);
    CHECK(c.lr_at(24) == 2.5e-4);
    CHECK(c.lr_at(1000) == 1.25e-4);
    c.milestones = {5, 3};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c.milestones = {};
    c.crop = 30;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c.crop = 32;
    c.align_learning_rate = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("first Adam step moves each weight by lr times the gradient sign") {
    ad::Parameter p("p", Tensor({3}, std::vector<Scalar>{1.0f, -2.0f, 0.5f}));
    ad::Parameter frozen("f", Tensor({1}, 1.0f)), untouched("u", Tensor({1}, 1.0f));
    frozen.set_frozen(true);
    {
        ad::Graph g;
        const Tensor w({3}, std::vector<Scalar>{3.0f, -0.5f, 0.25f});
        g.backward(ad::add(ad::sum(ad::mul(g.parameter(p), g.constant(w))), ad::sum(g.parameter(frozen))));
    }
    Adam opt;
    opt.step({&p, &frozen, &untouched}, 0.1);
    CHECK(p.value()[0] == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(p.value()[1] == doctest::Approx(-1.9).epsilon(1e-6));
    CHECK(p.value()[2] == doctest::Approx(0.4).epsilon(1e-6));
    CHECK(frozen.value()[0] == 1.0f);
    CHECK(untouched.value()[0] == 1.0f);
    CHECK(opt.slots().at("p").steps == 1);
    CHECK(opt.slots().count("f") == 0);
    CHECK(opt.slots().count("u") == 0);
    CHECK_FALSE(p.touched());

    // Second step against the Adam recurrences evaluated directly.
    {
        ad::Graph g;
        g.backward(ad::sum(ad::mul(g.parameter(p), g.parameter(p))));
    }
    const double g1 = 3.0, g2 = 2 * 0.9;
    const double m = 0.9 * 0.1 * g1 + 0.1 * g2, v = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
    const double want = 0.9 - 0.1 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
    opt.step({&p}, 0.1);
    CHECK(p.value()[0] == doctest::Approx(want).epsilon(1e-5));
}

TEST_CASE("loss combines the noise and image terms") {
    Rng rng(1);
    const Tensor a = rng.normal_tensor({2, 4, 4, 4}), b = rng.normal_tensor(a.shape());
    const Tensor c = rng.normal_tensor({2, 4, 4, 4}), d = rng.normal_tensor(c.shape());
    double se = 0, ae = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double e = double(a[i]) - b[i];
        se += e * e;
        ae += std::abs(double(c[i]) - d[i]);
    }
    const double want = se / a.size() + 0.7 * ae / c.size();
    CHECK(diffusion_loss(a, b, c, d, 0.7) == doctest::Approx(want).epsilon(1e-9));
    ad::Graph g(ad::GradMode::disabled);
    const LossTerms t = diffusion_loss(g.constant(a), g.constant(b), g.constant(c), g.constant(d), 0.7);
    CHECK(t.total.value().item() == doctest::Approx(want).epsilon(1e-5));
    CHECK(t.eps.value().item() == doctest::Approx(se / a.size()).epsilon(1e-5));
    CHECK_THROWS_AS(diffusion_loss(a, b, c, d, -1.0), std::invalid_argument);
}

TEST_CASE("batches diffuse the clean images at the resolution of step t") {
    const auto sched = DiffusionSchedule::build(20, 0.9999, 0.9);
    Rng rng(2);
    const std::vector<Tensor> clean = {uniform_tensor(rng, {4, 8, 12}), uniform_tensor(rng, {4, 8, 12})};
    const std::vector<Tensor> conds = {rng.normal_tensor({10, 8, 12}), rng.normal_tensor({10, 8, 12})};
    for (int t : {3, 15}) {
        Rng r(t);
        const TrainingBatch b = assemble_batch(clean, conds, t, sched, r);
        const std::size_t f = sched.factor(t);
        CHECK(b.x_t.shape() == Shape{2, 4, 8 / f, 12 / f});
        CHECK(b.cond.shape() == Shape{2, 10, 8 / f, 12 / f});
        CHECK(bitwise_equal(b.x_t, forward_sample(b.x_rt0, t, b.eps, sched)));
        Tensor first({4, 8 / f, 12 / f});
        std::copy(b.x_rt0.values().begin(), b.x_rt0.values().begin() + first.size(), first.values().begin());
        CHECK(bitwise_equal(first, downsample(clean[0], f)));
    }
    Rng r(0);
    CHECK_THROWS_AS(assemble_batch({uniform_tensor(rng, {4, 6, 8})}, {rng.normal_tensor({10, 6, 8})}, 3, sched, r),
                    ShapeError);
    CHECK_THROWS_AS(assemble_batch({}, {}, 3, sched, r), std::invalid_argument);
}

TEST_CASE("the color corrector sees a detached clean estimate") {
    const auto corpus = tiny_corpus(2);
    const NoiseSpace space = NoiseSpace::defaults();
    CheckpointBundle a = tiny_bundle(), b = tiny_bundle();
    const auto sched = a.schedule();
    const auto cams = partition(space, 2);
    Rng rng(5);
    const TrainingBatch batch = make_pretrain_batch(corpus, space, cams, sched, rng);
    const auto cc_before = a.cc.state();
    train_step(a.model, a.cc, a.optimizer, batch, sched, 0.0, 1e-3, Route::camera(batch.camera));
    train_step(b.model, b.cc, b.optimizer, batch, sched, 5.0, 1e-3, Route::camera(batch.camera));
    // The image term never reaches the denoiser.
    const auto sa = a.model.state(), sb = b.model.state();
    for (const auto& [name, value] : sa) {
        CAPTURE(name);
        CHECK(bitwise_equal(value, sb.at(name)));
    }
    // Without the image term the corrector receives zero gradient.
    for (const auto& [name, value] : a.cc.state()) {
        CAPTURE(name);
        CHECK(bitwise_equal(value, cc_before.at(name)));
    }
    bool cc_moved = false;
    for (const auto& [name, value] : b.cc.state()) cc_moved |= !bitwise_equal(value, cc_before.at(name));
    CHECK(cc_moved);
}

TEST_CASE("stages enforce the model mode") {
    const auto corpus = tiny_corpus(2);
    CheckpointBundle b = tiny_bundle();
    CHECK_THROWS_AS(run_aligning(b, tiny_pairs()), ModeError);
    CHECK_THROWS_AS(reparameterize(b), ModeError);
    CHECK_THROWS_AS(run_pretraining(b, {}, NoiseSpace::defaults()), DataError);
    begin_aligning(b);
    CHECK(b.model.convs_frozen());
    CHECK(b.iteration == 0);
    CHECK_THROWS_AS(begin_aligning(b), ModeError);
    CHECK_THROWS_AS(run_pretraining(b, corpus, NoiseSpace::defaults()), ModeError);
    CHECK_THROWS_AS(run_aligning(b, {}), DataError);
    b.model.freeze_convs(false);
    CHECK_THROWS_AS(run_aligning(b, tiny_pairs()), ModeError);
}

TEST_CASE("pretraining is reproducible across prefetch depths and interruptions") {
    const auto corpus = tiny_corpus();
    const NoiseSpace space = NoiseSpace::defaults();
    auto run = [&](std::size_t prefetch, int chunk) {
        CheckpointBundle b = tiny_bundle();
        b.train.prefetch = prefetch;
        std::vector<std::string> lines;
        const StepLogger log = [&](int it, const StepResult& r) { lines.push_back(format_step(it, r)); };
        if (chunk < 0) {
            run_pretraining(b, corpus, space, log);
        } else {
            while (b.iteration < b.train.pretrain_iterations) {
                run_pretraining(b, corpus, space, log, chunk);
                b = deserialize_checkpoint(serialize_checkpoint(b));
            }
        }
        b.train.prefetch = 0;  // recorded in the manifest
        return std::pair{serialize_checkpoint(b), lines};
    };
    const auto [inline_bytes, inline_log] = run(0, -1);
    const auto [queued_bytes, queued_log] = run(4, -1);
    const auto [resumed_bytes, resumed_log] = run(2, 4);
    CHECK(inline_bytes == queued_bytes);
    CHECK(inline_bytes == resumed_bytes);
    CHECK(inline_log == queued_log);
    CHECK(inline_log == resumed_log);
    REQUIRE(inline_log.size() == 6);
    CHECK(inline_log[0].rfind("iter=1 loss=", 0) == 0);
    CHECK(inline_log[2].find("lr=0.0005 ") != std::string::npos);
    CHECK(inline_log[3].find("lr=0.00025 ") != std::string::npos);
}

TEST_CASE("aligning updates CFIs and the corrector but never the convolutions") {
    CheckpointBundle b = tiny_bundle();
    run_pretraining(b, tiny_corpus(), NoiseSpace::defaults());
    begin_aligning(b);
    const auto before = b.model.state();
    const auto cc_before = b.cc.state();
    std::vector<double> lrs;
    run_aligning(b, tiny_pairs(), [&](int, const StepResult& r) {
        lrs.push_back(r.lr);
        for (const auto& [name, value] : b.model.state())
            if (name.find(".cfi_t.") == std::string::npos) REQUIRE(bitwise_equal(value, before.at(name)));
    });
    CHECK(lrs == std::vector<double>(5, b.train.align_learning_rate));
    bool cfi_moved = false, cc_moved = false;
    for (const auto& [name, value] : b.model.state())
        if (name.find(".cfi_t.") != std::string::npos) cfi_moved |= !bitwise_equal(value, before.at(name));
    for (const auto& [name, value] : b.cc.state()) cc_moved |= !bitwise_equal(value, cc_before.at(name));
    CHECK(cfi_moved);
    CHECK(cc_moved);
    reparameterize(b);
    CHECK(b.model.mode() == DenoiserMode::merged);
    CHECK(b.optimizer.slots().empty());
}

TEST_CASE("checkpoints round-trip byte for byte in every mode") {
    CheckpointBundle b = tiny_bundle();
    b.provenance = {{"data_dir", "somewhere"}, {"seed", "9"}};
    run_pretraining(b, tiny_corpus(), NoiseSpace::defaults(), {}, 2);
    TempDir dir("ckpt");
    for (int stage = 0; stage < 3; ++stage) {
        if (stage == 1) {
            begin_aligning(b);
            run_aligning(b, tiny_pairs(), {}, 2);
        }
        if (stage == 2) reparameterize(b);
        const auto bytes = serialize_checkpoint(b);
        save_checkpoint(b, dir / "x.ckpt");
        const CheckpointBundle back = load_checkpoint(dir / "x.ckpt");
        CHECK(serialize_checkpoint(back) == bytes);
        CHECK(back.model.mode() == b.model.mode());
        CHECK(back.model.convs_frozen() == b.model.convs_frozen());
        CHECK(back.iteration == b.iteration);
        CHECK(back.train == b.train);
        CHECK(back.provenance == b.provenance);
        CHECK(back.optimizer.slots().size() == b.optimizer.slots().size());
    }
}

TEST_CASE("corrupt checkpoints are rejected with a reason") {
    const auto bytes = serialize_checkpoint(tiny_bundle());
    auto expect_error = [](std::vector<std::uint8_t> data, const std::string& fragment) {
        try {
            deserialize_checkpoint(data, "t.ckpt");
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CAPTURE(e.what());
            CHECK(std::string(e.what()).find(fragment) != std::string::npos);
        }
    };
    auto bumped = bytes;
    const std::string key = "schema_version = 1";
    const auto at = std::search(bumped.begin(), bumped.end(), key.begin(), key.end());
    REQUIRE(at != bumped.end());
    *(at + static_cast<std::ptrdiff_t>(key.size()) - 1) = '2';
    expect_error(bumped, "schema_version 2");
    expect_error({bytes.begin(), bytes.end() - 3}, "t.ckpt");
    auto magic = bytes;
    magic[0] = 'X';
    expect_error(magic, "magic");
    expect_error({bytes.begin(), bytes.begin() + 12}, "t.ckpt");
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), DataError);
}

namespace {

double held_out_loss(const DenoiserModel& model, const ColorCorrector& cc, const TrainingBatch& batch,
                     const DiffusionSchedule& sched, double lambda_img, Route route) {
    ad::Graph g(ad::GradMode::disabled);
    const Tensor eps_hat = model.forward(g, g.constant(batch.x_t), g.constant(batch.cond), batch.t, route).value();
    Tensor x0 = predict_x0(batch.x_t, batch.t, eps_hat, sched);
    for (Scalar& v : x0.values()) v = std::clamp(v, Scalar(0), Scalar(1));
    const Tensor x0c = cc.correct(x0, batch.t);
    return diffusion_loss(eps_hat, batch.eps, x0c, batch.x_rt0, lambda_img);
}

} // namespace

TEST_CASE("perfect predictions give zero loss") {
    Rng rng(2);
    const Tensor a = rng.normal_tensor({1, 4, 4, 4}), c = uniform_tensor(rng, {1, 4, 4, 4});
    CHECK(diffusion_loss(a, a, c, c, 1.0) == 0.0);
    Tensor x0({1, 4, 1, 2}, 0.0f), tgt({1, 4, 1, 2}, 0.0f);
    x0[0] = 0.5f;
    tgt[1] = 0.25f;
    // two differing pixels out of eight, eps term zero
    CHECK(diffusion_loss(Tensor(x0.shape()), Tensor(x0.shape()), x0, tgt, 2.0) ==
          doctest::Approx(2.0 * (0.5 + 0.25) / 8).epsilon(1e-12));
}

TEST_CASE("repeated steps on a fixed batch reduce its loss") {
    CheckpointBundle b = tiny_bundle(4);
    const auto sched = b.schedule();
    const NoiseSpace space = NoiseSpace::defaults();
    const auto cams = partition(space, b.model.config().cameras);
    Rng rng(12);
    const auto corpus = tiny_corpus();
    const TrainingBatch batch = make_pretrain_batch(draw_scenes(corpus, b.train, rng), space, cams, sched, rng);
    const Route route = Route::camera(batch.camera);
    const double before = held_out_loss(b.model, b.cc, batch, sched, b.train.lambda_img, route);
    for (int k = 0; k < 50; ++k) train_step(b.model, b.cc, b.optimizer, batch, sched, b.train.lambda_img, 1e-3, route);
    const double after = held_out_loss(b.model, b.cc, batch, sched, b.train.lambda_img, route);
    CAPTURE(before);
    CAPTURE(after);
    CHECK(after < before);
}

TEST_CASE("only the routed pathway receives gradient") {
    CheckpointBundle b = tiny_bundle(6);
    const auto sched = b.schedule();
    Rng rng(13);
    const TrainingBatch batch = make_pretrain_batch(draw_scenes(tiny_corpus(), b.train, rng), NoiseSpace::defaults(),
                                                    partition(NoiseSpace::defaults(), 2), sched, rng);
    auto norm = [](const std::vector<ad::Parameter*>& ps) {
        double s = 0;
        for (const auto* p : ps)
            for (Scalar v : p->grad().values()) s += std::abs(v);
        return s;
    };
    for (std::size_t cam : {1u, 2u}) {
        for (auto* p : b.model.parameters()) p->zero_grad();
        ad::Graph g;
        ad::Var out = b.model.forward(g, g.constant(batch.x_t), g.constant(batch.cond), batch.t, Route::camera(cam));
        g.backward(ad::sum(out));
        CAPTURE(cam);
        CHECK(norm(b.model.pathway_parameters(cam)) > 0.0);
        CHECK(norm(b.model.pathway_parameters(3 - cam)) == 0.0);
    }
}

TEST_CASE("aligning lowers the loss on held-out target batches") {
    CheckpointBundle b = tiny_bundle(7);
    run_pretraining(b, tiny_corpus(), NoiseSpace::defaults());
    begin_aligning(b);
    const auto sched = b.schedule();
    const auto pairs = tiny_pairs();
    std::vector<TrainingBatch> held;
    for (std::uint64_t k = 0; k < 6; ++k) {
        Rng rng = Rng::stream(40, k);
        held.push_back(make_align_batch(draw_pairs(pairs, b.train, rng), sched, rng));
    }
    auto mean_loss = [&] {
        double s = 0;
        for (const auto& h : held) s += held_out_loss(b.model, b.cc, h, sched, b.train.lambda_img, Route::target());
        return s / static_cast<double>(held.size());
    };
    const double before = mean_loss();
    Rng rng(41);
    for (int k = 0; k < 200; ++k) align_step(b.model, b.cc, b.optimizer, pairs, sched, b.train.lambda_img, 1e-3, rng);
    const double after = mean_loss();
    CAPTURE(before);
    CAPTURE(after);
    CHECK(after < before);
}
