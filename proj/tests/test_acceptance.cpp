// End-to-end acceptance suite. Each numbered check prints one PASS/FAIL
// line; the slow training comparisons share cached runs.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "cape/model.hpp"
#include "cape/pe.hpp"
#include "cape/train.hpp"

using namespace cape;

static void report(int criterion, const char* what, bool pass) {
    std::printf("[acceptance] criterion %d (%s): %s\n", criterion, what, pass ? "PASS" : "FAIL");
    std::fflush(stdout);
}

// ---------------------------------------------------------------- 1

TEST_CASE("1: gradients match finite differences for every backbone x variant") {
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = true;
    for (const std::string& b : {"din", "sasrec"})
        for (auto v : {PEVariant::None, PEVariant::Naive, PEVariant::Rope, PEVariant::Cope,
                       PEVariant::Cape}) {
            auto rep = gradcheck_combo(b, v, 1e-4, 1);
            CHECK_MESSAGE(rep.pass, rep.combo, " max_rel_err=", rep.max_rel_err);
            pass = pass && rep.pass;
        }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(secs < 120.0);
    report(1, "gradient finite-difference suite", pass && secs < 120.0);
}

// ---------------------------------------------------------------- 2

TEST_CASE("2: unit gates reduce fractional positions to integer lookup") {
    Rng rng(2);
    PEConfig cfg;
    cfg.d = 8;
    cfg.d_pos = 5;
    cfg.n_max = 12;
    auto table = PositionTable::init(cfg.n_max, cfg.d_pos, rng);
    const long B = 4, n = 9;

    double worst = 0.0;
    Tape t;
    std::vector<double> tprime_v((std::size_t)(B * cfg.d_pos));
    for (auto& v : tprime_v) v = rng.uniform(-2, 2);
    auto tprime = Tensor::from({B, cfg.d_pos}, tprime_v);

    PositionState st;
    st.gates = Tensor::from({B, n}, std::vector<double>((std::size_t)(B * n), 1.0));
    st = accumulate_positions(t, st);  // p_j = n - j exactly
    auto z = integer_position_logits(t, tprime, table);        // [B, n_max+1]
    auto zi = interpolate_position_logits(t, z, st.positions);  // [B, n]

    for (long e = 0; e < B; ++e)
        for (long j = 0; j < n; ++j) {
            const long p = n - j;
            const double direct = z.data()[e * (cfg.n_max + 1) + p];
            worst = std::max(worst, std::abs(direct - zi.data()[e * n + j]));
        }
    CHECK(worst < 1e-12);
    report(2, "unit-gate degeneracy to integer relative positions", worst < 1e-12);
}

// ---------------------------------------------------------------- 3

TEST_CASE("3: logit interpolation commutes with embedding interpolation") {
    Rng rng(3);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const long d_pos = rng.randint(2, 8);
        const long n_max = rng.randint(2, 20);
        auto table = PositionTable::init(n_max, d_pos, rng);
        std::vector<double> tp((std::size_t)d_pos);
        for (auto& v : tp) v = rng.uniform(-3, 3);
        const double p = rng.uniform(0, (double)n_max);

        Tape t;
        auto tprime = Tensor::from({1, d_pos}, tp);
        auto z = integer_position_logits(t, tprime, table);
        auto zi = interpolate_position_logits(t, z, Tensor::from({1, 1}, {p}));

        auto e = interpolate_position_embedding(p, table);
        double direct = 0.0;
        for (long i = 0; i < d_pos; ++i) direct += tp[(std::size_t)i] * e[(std::size_t)i];
        worst = std::max(worst, std::abs(direct - zi.data()[0]));
    }
    CHECK(worst < 1e-12);
    report(3, "logit vs embedding interpolation commute", worst < 1e-12);
}

// ---------------------------------------------------------------- 4

static double auc_pairwise(const std::vector<double>& s, const std::vector<double>& y) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[i] <= 0.5 || y[j] > 0.5) continue;
            den += 1;
            num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    return num / den;
}

TEST_CASE("4: ranking metrics match brute-force oracles") {
    Rng rng(4);
    double worst = 0.0;

    std::vector<double> s, y;
    std::vector<long> u;
    for (int i = 0; i < 1000; ++i) {
        s.push_back(std::floor(rng.uniform() * 50) / 50.0);  // ties on purpose
        y.push_back(rng.uniform() < 0.45 ? 1.0 : 0.0);
        u.push_back(rng.randint(0, 24));
    }
    worst = std::max(worst, std::abs(auc(s, y) - auc_pairwise(s, y)));

    double wsum = 0, acc = 0;
    for (long g = 0; g < 25; ++g) {
        std::vector<double> gs, gy;
        for (std::size_t i = 0; i < s.size(); ++i)
            if (u[i] == g) {
                gs.push_back(s[i]);
                gy.push_back(y[i]);
            }
        bool hp = false, hn = false;
        for (double v : gy) (v > 0.5 ? hp : hn) = true;
        if (!hp || !hn) continue;
        acc += gs.size() * auc_pairwise(gs, gy);
        wsum += gs.size();
    }
    worst = std::max(worst, std::abs(gauc(s, y, u) - acc / wsum));

    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> sc;
        const long C = rng.randint(2, 40);
        for (long i = 0; i < C; ++i) sc.push_back(rng.uniform());
        const long pos = rng.randint(0, C - 1);
        long better = 0;
        for (double v : sc)
            if (v > sc[pos]) ++better;
        for (long k = 1; k <= C; ++k) {
            const double r_want = better + 1 <= k ? 1.0 : 0.0;
            const double n_want = better + 1 <= k ? 1.0 / std::log2(better + 2.0) : 0.0;
            worst = std::max(worst, std::abs(recall_at_k(sc, pos, k) - r_want));
            worst = std::max(worst, std::abs(ndcg_at_k(sc, pos, k) - n_want));
        }
    }
    CHECK(worst < 1e-12);
    report(4, "AUC/gAUC/Recall/NDCG oracles", worst < 1e-12);
}

// ---------------------------------------------------------------- 5

static ModelConfig order_config(PEVariant v) {
    ModelConfig mc;
    mc.backbone = "din";
    mc.pe.variant = v;
    mc.n_items = 40;
    mc.n_cats = 8;
    mc.feat_dim = 4;
    mc.pe.d = 8;
    mc.pe.d_pos = 4;
    mc.pe.n_max = 10;
    mc.mlp_hidden = {8};
    mc.head_hidden = {8};
    return mc;
}

static ContextBatch order_batch(Rng& rng, bool reversed) {
    ContextBatch b;
    b.batch = 1;
    b.n = 8;
    for (long j = 0; j < b.n; ++j) {
        b.items.push_back(rng.randint(2, 39));
        b.cats.push_back(rng.randint(2, 7));
    }
    if (reversed) {
        std::reverse(b.items.begin(), b.items.end());
        std::reverse(b.cats.begin(), b.cats.end());
    }
    b.lengths = {8};
    b.target_items = {rng.randint(2, 39)};
    b.target_cats = {rng.randint(2, 7)};
    b.labels = {1.0};
    b.mask.assign(8, 1);
    b.user_ids = {1};
    return b;
}

TEST_CASE("5: no-PE output is order invariant; every PE variant is order sensitive") {
    auto run = [](PEVariant v, bool reversed) {
        Model m(order_config(v), 5);
        Rng rng(1);  // same draws for both orderings
        auto b = order_batch(rng, reversed);
        Tape t;
        return m.forward(t, b).data()[0];
    };
    const double none_diff = std::abs(run(PEVariant::None, false) - run(PEVariant::None, true));
    CHECK(none_diff < 1e-12);
    bool pass = none_diff < 1e-12;
    for (auto v : {PEVariant::Naive, PEVariant::Rope, PEVariant::Cope, PEVariant::Cape}) {
        const double diff = std::abs(run(v, false) - run(v, true));
        CHECK_MESSAGE(diff > 1e-6, "variant ", to_string(v), " diff=", diff);
        pass = pass && diff > 1e-6;
    }
    report(5, "order (in)variance by PE variant", pass);
}

// ------------------------------------------------------- 6, 7, 8 (shared runs)

namespace {

struct BenchKey {
    std::string backbone;
    PEVariant variant;
    long d_pos;
    long intents;
    bool operator<(const BenchKey& o) const {
        return std::tie(backbone, variant, d_pos, intents) <
               std::tie(o.backbone, o.variant, o.d_pos, o.intents);
    }
};

constexpr long kSeeds = 5;

std::map<long, std::vector<Interaction>> g_datasets;  // by intent count
std::map<BenchKey, double> g_bench;                   // mean test AUC

const std::vector<Interaction>& bench_data(long intents, std::uint64_t seed) {
    const long key = intents * 100 + (long)seed;
    auto it = g_datasets.find(key);
    if (it != g_datasets.end()) return it->second;
    SyntheticSpec spec;
    spec.n_users = 2000;
    spec.n_items = 500;
    spec.n_intents = intents;
    spec.items_per_intent = 500 / intents;
    spec.ctx_len_min = 30;
    spec.ctx_len_max = 30;
    spec.seg_len_min = 3;
    spec.seg_len_max = 8;
    spec.seed = 9000 + seed;
    return g_datasets.emplace(key, generate_synthetic(spec)).first->second;
}

double bench_mean_auc(const BenchKey& key) {
    auto it = g_bench.find(key);
    if (it != g_bench.end()) return it->second;

    double sum = 0.0;
    for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
        const auto& data = bench_data(key.intents, seed);
        auto split = split_by_user(data, seed);

        ModelConfig mc;
        mc.backbone = key.backbone;
        mc.pe.variant = key.variant;
        mc.n_items = 502;
        mc.n_cats = key.intents + 2;
        mc.feat_dim = 16;
        mc.pe.d = 32;
        mc.pe.d_pos = key.d_pos;
        mc.pe.n_max = 30;
        mc.mlp_hidden = {32};
        mc.head_hidden = {32};
        mc.n_heads = 2;
        mc.n_blocks = key.backbone == "sasrec" ? 2 : 1;

        TrainConfig tc;
        tc.lr = 5e-3;
        tc.batch_size = 256;
        tc.max_epochs = key.backbone == "sasrec" ? 10 : 15;
        tc.patience = 3;
        tc.rank_metrics = false;
        tc.seed = seed;

        Model m(mc, Rng::substream(seed, "init").next_u64());
        train(m, split.train, split.val, tc);
        sum += evaluate(m, split.test, tc).auc;
    }
    const double mean = sum / kSeeds;
    std::printf("[bench] %s+%s d_pos=%ld intents=%ld: mean test AUC %.4f\n",
                key.backbone.c_str(), to_string(key.variant).c_str(), key.d_pos, key.intents,
                mean);
    std::fflush(stdout);
    return g_bench.emplace(key, mean).first->second;
}

}  // namespace

TEST_CASE("6: contextual positions beat no/naive positions on the intent benchmark") {
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = true;
    for (const std::string& b : {"din", "sasrec"}) {
        const double cape = bench_mean_auc({b, PEVariant::Cape, 32, 10});
        const double none = bench_mean_auc({b, PEVariant::None, 16, 10});
        const double naive = bench_mean_auc({b, PEVariant::Naive, 16, 10});
        CHECK_MESSAGE(cape >= none + 0.01, b, ": cape=", cape, " none=", none);
        CHECK_MESSAGE(cape >= naive, b, ": cape=", cape, " naive=", naive);
        pass = pass && cape >= none + 0.01 && cape >= naive;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(secs < 900.0);
    report(6, "benchmark ordering cape > none, cape >= naive", pass && secs < 900.0);
}

TEST_CASE("7: no advantage on the single-intent control") {
    const double cape = bench_mean_auc({"din", PEVariant::Cape, 16, 1});
    const double none = bench_mean_auc({"din", PEVariant::None, 16, 1});
    const double gap = std::abs(cape - none);
    CHECK_MESSAGE(gap < 0.02, "cape=", cape, " none=", none);
    report(7, "single-intent control gap < 0.02", gap < 0.02);
}

TEST_CASE("8: reduced position dimension still wins") {
    const double none = bench_mean_auc({"din", PEVariant::None, 16, 10});
    bool pass = true;
    for (long d_pos : {16L, 32L}) {
        const double cape = bench_mean_auc({"din", PEVariant::Cape, d_pos, 10});
        CHECK_MESSAGE(cape > none, "d_pos=", d_pos, " cape=", cape, " none=", none);
        pass = pass && cape > none;
    }
    report(8, "d_pos 16 and 32 both beat no-PE", pass);
}

// ---------------------------------------------------------------- 9

TEST_CASE("9: identical seeds give bitwise-identical metric lines") {
    SyntheticSpec spec;
    spec.n_users = 200;
    spec.n_items = 100;
    spec.n_intents = 5;
    spec.items_per_intent = 20;
    spec.ctx_len_min = 20;
    spec.ctx_len_max = 20;
    spec.seed = 77;
    auto data = generate_synthetic(spec);
    auto split = split_by_user(data, 3);

    auto run = [&](const std::string& stamp) {
        ModelConfig mc;
        mc.backbone = "din";
        mc.pe.variant = PEVariant::Cape;
        mc.n_items = 102;
        mc.n_cats = 7;
        mc.feat_dim = 8;
        mc.pe.d = 16;
        mc.pe.d_pos = 8;
        mc.pe.n_max = 20;
        mc.mlp_hidden = {16};
        mc.head_hidden = {16};
        TrainConfig tc;
        tc.lr = 5e-3;
        tc.batch_size = 64;
        tc.max_epochs = 3;
        tc.seed = 11;
        Model m(mc, Rng::substream(tc.seed, "init").next_u64());
        auto res = train(m, split.train, split.val, tc);
        std::ostringstream os;
        for (const auto& rep : res.history) os << metrics_jsonl_line(rep, stamp) << "\n";
        return os.str();
    };

    auto strip_stamp = [](const std::string& s) {
        std::string out;
        std::istringstream is(s);
        std::string line;
        while (std::getline(is, line)) {
            const auto p = line.find(",\"timestamp\"");
            out += line.substr(0, p) + "\n";
        }
        return out;
    };

    const auto a = run("1970-01-01T00:00:00Z");
    const auto b = run("2038-01-19T03:14:07Z");
    CHECK(a != b);  // the timestamp really is in the line
    const bool pass = strip_stamp(a) == strip_stamp(b) && a != b;
    CHECK(strip_stamp(a) == strip_stamp(b));
    report(9, "bitwise-identical metrics JSONL modulo timestamp", pass);
}
