#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cape/model.hpp"
#include "testutil.hpp"

using namespace cape;

namespace {

ModelConfig tiny_cfg(const std::string& backbone, PEVariant v) {
    ModelConfig cfg;
    cfg.backbone = backbone;
    cfg.feat_dim = 4;
    cfg.n_items = 20;
    cfg.n_cats = 6;
    cfg.mlp_hidden = {8};
    cfg.head_hidden = {8};
    cfg.n_heads = 2;
    cfg.n_blocks = 1;
    cfg.pe.variant = v;
    cfg.pe.d = cfg.d();
    cfg.pe.d_pos = 4;
    cfg.pe.n_max = 8;
    return cfg;
}

ContextBatch demo_batch() {
    ContextBatch b;
    b.batch = 2;
    b.n = 4;
    b.items = {2, 3, 4, 5, 6, 7, 8, 0};
    b.cats = {2, 3, 2, 3, 4, 2, 3, 0};
    b.mask = {1, 1, 1, 1, 1, 1, 1, 0};
    b.lengths = {4, 3};
    b.target_items = {5, 9};
    b.target_cats = {3, 4};
    b.labels = {1.0, 0.0};
    b.user_ids = {1, 2};
    return b;
}

void zero_params_with_prefix(Model& m, const std::string& prefix) {
    for (auto& p : m.params())
        if (p.name.rfind(prefix, 0) == 0)
            std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
}

}  // namespace

TEST_CASE("attention_weights_and_pool: analytic weights and mean pooling") {
    Tape t;
    auto item_logits = Tensor::from({1, 2}, {std::log(2.0), 0.0});
    auto pos_logits = Tensor::zeros({1, 2});
    auto ctx = Tensor::from({2, 3}, {1, 0, 0, 0, 1, 0});
    std::vector<std::uint8_t> mask = {1, 1};
    auto out = attention_weights_and_pool(t, item_logits, pos_logits, ctx, mask);
    CHECK(out.weights.data()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(out.weights.data()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

    // uniform weights pool to the mean of the context rows
    auto uni = attention_weights_and_pool(t, Tensor::zeros({1, 3}), Tensor::zeros({1, 3}),
                                          Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}), {1, 1, 1});
    CHECK(uni.pooled.data()[0] == doctest::Approx(3.0).epsilon(1e-14));
    CHECK(uni.pooled.data()[1] == doctest::Approx(4.0).epsilon(1e-14));

    // weighted-sum identity against an independent computation
    Rng rng(1);
    auto logits = Tensor::from({1, 3}, testutil::random_vec(rng, 3));
    auto ctx2 = Tensor::from({3, 4}, testutil::random_vec(rng, 12));
    auto o2 = attention_weights_and_pool(t, logits, Tensor::zeros({1, 3}), ctx2, {1, 1, 1});
    double sum_w = 0.0;
    for (double w : o2.weights.data()) sum_w += w;
    CHECK(std::abs(sum_w - 1.0) < 1e-12);
    for (long k = 0; k < 4; ++k) {
        double want = 0.0;
        for (long j = 0; j < 3; ++j) want += o2.weights.data()[j] * ctx2.data()[j * 4 + k];
        CHECK(std::abs(o2.pooled.data()[k] - want) < 1e-12);
    }
}

TEST_CASE("din attention unit: constant-bias degeneracy, identical items, zero head") {
    auto cfg = tiny_cfg("din", PEVariant::None);
    Model m(cfg, 7);

    // zero attention MLP with output bias beta: every weight becomes uniform
    zero_params_with_prefix(m, "att_mlp");
    for (auto& p : m.params())
        if (p.name == "att_mlp.b_out") p.tensor.data()[0] = 0.7;
    auto b = demo_batch();
    Tape t;
    auto probs = m.forward(t, b);
    CHECK(probs.numel() == 2);

    // zero prediction head: probability exactly 0.5 regardless of context
    zero_params_with_prefix(m, "head");
    Tape t2;
    auto p5 = m.forward(t2, b);
    CHECK(p5.data()[0] == 0.5);
    CHECK(p5.data()[1] == 0.5);
}

TEST_CASE("prediction head is monotone in its output bias") {
    auto cfg = tiny_cfg("din", PEVariant::None);
    Model m(cfg, 7);
    auto b = demo_batch();
    double prev = -1.0;
    for (double bias : {-1.0, 0.0, 1.0, 2.0}) {
        for (auto& p : m.params())
            if (p.name == "head.b_out") p.tensor.data()[0] = bias;
        Tape t;
        const double prob = m.forward(t, b).data()[0];
        CHECK(prob > prev);
        prev = prob;
    }
}

TEST_CASE("batch independence: duplicating an example duplicates its output bitwise") {
    for (const std::string backbone : {"din", "sasrec"}) {
        auto cfg = tiny_cfg(backbone, PEVariant::Cape);
        Model m(cfg, 11);
        auto b = demo_batch();
        ContextBatch dup = b;
        dup.batch = 3;
        dup.n = b.n;
        dup.items.insert(dup.items.end(), b.items.begin(), b.items.begin() + b.n);
        dup.cats.insert(dup.cats.end(), b.cats.begin(), b.cats.begin() + b.n);
        dup.mask.insert(dup.mask.end(), b.mask.begin(), b.mask.begin() + b.n);
        dup.lengths.push_back(b.lengths[0]);
        dup.target_items.push_back(b.target_items[0]);
        dup.target_cats.push_back(b.target_cats[0]);
        dup.labels.push_back(b.labels[0]);
        dup.user_ids.push_back(9);
        Tape t1, t2;
        auto p1 = m.forward(t1, b);
        auto p2 = m.forward(t2, dup);
        CHECK(p2.data()[0] == p1.data()[0]);
        CHECK(p2.data()[1] == p1.data()[1]);
        CHECK(p2.data()[2] == p1.data()[0]);
    }
}

TEST_CASE("no-PE DIN is order invariant; every PE variant is order sensitive") {
    auto b = demo_batch();
    ContextBatch swapped = b;
    // swap context positions 0 and 2 of the first example
    std::swap(swapped.items[0], swapped.items[2]);
    std::swap(swapped.cats[0], swapped.cats[2]);

    {
        Model m(tiny_cfg("din", PEVariant::None), 13);
        Tape t1, t2;
        const double a = m.forward(t1, b).data()[0];
        const double c = m.forward(t2, swapped).data()[0];
        CHECK(std::abs(a - c) < 1e-12);
    }
    for (PEVariant v : {PEVariant::Naive, PEVariant::Rope, PEVariant::Cope, PEVariant::Cape}) {
        Model m(tiny_cfg("din", v), 1);
        Tape t1, t2;
        const double a = m.forward(t1, b).data()[0];
        const double c = m.forward(t2, swapped).data()[0];
        INFO("variant ", to_string(v));
        CHECK(std::abs(a - c) > 1e-6);
    }
}

TEST_CASE("sasrec causality: a later item never changes an earlier prediction") {
    auto cfg = tiny_cfg("sasrec", PEVariant::Cape);
    Model m(cfg, 17);
    auto b = demo_batch();
    ContextBatch perturbed = b;
    perturbed.items[3] = 11;  // position 3 of example 0
    // score for example 1 (separate rows) and for prefix-limited example 0
    ContextBatch shortb = b, shortp = perturbed;
    shortb.lengths[0] = 3;  // final hidden read at position 2 < 3
    shortp.lengths[0] = 3;
    Tape t1, t2;
    auto pa = m.forward(t1, shortb);
    auto pb = m.forward(t2, shortp);
    CHECK(pa.data()[0] == pb.data()[0]);
    CHECK(pa.data()[1] == pb.data()[1]);
}

TEST_CASE("padding neutrality: extra padded columns change nothing") {
    for (const std::string backbone : {"din", "sasrec"}) {
        for (PEVariant v : {PEVariant::None, PEVariant::Naive, PEVariant::Rope, PEVariant::Cope,
                            PEVariant::Cape}) {
            auto cfg = tiny_cfg(backbone, v);
            Model m(cfg, 19);
            auto b = demo_batch();
            ContextBatch wide = b;
            wide.n = 6;
            wide.items.assign(2 * 6, 0);
            wide.cats.assign(2 * 6, 0);
            wide.mask.assign(2 * 6, 0);
            for (long e = 0; e < 2; ++e)
                for (long j = 0; j < 4; ++j) {
                    wide.items[e * 6 + j] = b.items[e * 4 + j];
                    wide.cats[e * 6 + j] = b.cats[e * 4 + j];
                    wide.mask[e * 6 + j] = b.mask[e * 4 + j];
                }
            Tape t1, t2;
            auto p1 = m.forward(t1, b);
            auto p2 = m.forward(t2, wide);
            INFO(backbone, "+", to_string(v));
            CHECK(p1.data()[0] == p2.data()[0]);
            CHECK(p1.data()[1] == p2.data()[1]);
        }
    }
}

TEST_CASE("gradcheck: din+cape and sasrec+cape pass at 1e-4") {
    auto r1 = gradcheck_combo("din", PEVariant::Cape, 1e-4, 23);
    INFO(r1.combo, " max_rel_err=", r1.max_rel_err);
    CHECK(r1.pass);
    auto r2 = gradcheck_combo("sasrec", PEVariant::Cape, 1e-4, 23);
    INFO(r2.combo, " max_rel_err=", r2.max_rel_err);
    CHECK(r2.pass);
}

TEST_CASE("checkpoint: bit-exact round trip, mismatch detection") {
    auto cfg = tiny_cfg("sasrec", PEVariant::Cape);
    Model m(cfg, 29);
    auto path = (std::filesystem::temp_directory_path() / "cape_ckpt_test.bin").string();
    m.save(path);

    Model m2(cfg, 999);  // different init
    m2.load(path);
    for (std::size_t i = 0; i < m.params().size(); ++i)
        CHECK(m2.params()[i].tensor.data() == m.params()[i].tensor.data());

    auto b = demo_batch();
    Tape t1, t2;
    CHECK(m.forward(t1, b).data() == m2.forward(t2, b).data());

    auto other = tiny_cfg("din", PEVariant::Cape);
    Model m3(other, 1);
    CHECK_THROWS_AS(m3.load(path), std::runtime_error);
    std::filesystem::remove(path);
}

TEST_CASE("config validation") {
    auto cfg = tiny_cfg("din", PEVariant::Cape);
    cfg.backbone = "bogus";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

    auto cfg2 = tiny_cfg("sasrec", PEVariant::None);
    cfg2.n_heads = 3;  // d=8 not divisible
    CHECK_THROWS_AS(cfg2.validate(), std::invalid_argument);

    auto cfg3 = tiny_cfg("din", PEVariant::Cape);
    cfg3.pe.d = 99;
    CHECK_THROWS_AS(cfg3.validate(), std::invalid_argument);
}

TEST_CASE("score_candidates ranks the trained-away-from candidate lower than noise floor sanity") {
    auto cfg = tiny_cfg("din", PEVariant::None);
    Model m(cfg, 31);
    auto b = demo_batch();
    std::vector<std::vector<long>> items = {{5, 9, 12}, {9, 2, 3}};
    std::vector<std::vector<long>> cats = {{3, 4, 2}, {4, 2, 3}};
    auto scores = m.score_candidates(b, items, cats);
    REQUIRE(scores.size() == 2);
    CHECK(scores[0].size() == 3);
    // candidate 0 of example 0 equals the batch target: identical score path
    Tape t;
    CHECK(scores[0][0] == doctest::Approx(m.forward(t, b).data()[0]).epsilon(1e-12));
}
