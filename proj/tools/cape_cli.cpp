// cape: generate data, train, evaluate, and verify gradients from the shell.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cape/model.hpp"
#include "cape/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace cape;

static std::string utc_now() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::string train_csv, val_csv, test_csv;
    std::string out_dir = "out";
    std::string pe_name = "cape";
};

template <typename T>
static void maybe(const json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

static RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
    json j;
    in >> j;
    RunConfig rc;
    if (j.contains("model")) {
        const auto& m = j["model"];
        maybe(m, "backbone", rc.model.backbone);
        maybe(m, "pe", rc.pe_name);
        maybe(m, "n_items", rc.model.n_items);
        maybe(m, "n_cats", rc.model.n_cats);
        maybe(m, "feat_dim", rc.model.feat_dim);
        maybe(m, "mlp_hidden", rc.model.mlp_hidden);
        maybe(m, "head_hidden", rc.model.head_hidden);
        maybe(m, "n_heads", rc.model.n_heads);
        maybe(m, "n_blocks", rc.model.n_blocks);
        maybe(m, "ff_mult", rc.model.ff_mult);
        maybe(m, "din_use_diff", rc.model.din_use_diff);
        maybe(m, "d_pos", rc.model.pe.d_pos);
        maybe(m, "n_max", rc.model.pe.n_max);
        maybe(m, "gate_sim_scale", rc.model.pe.gate_sim_scale);
        maybe(m, "cope_p_max", rc.model.pe.cope_p_max);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        maybe(t, "lr", rc.train.lr);
        maybe(t, "batch_size", rc.train.batch_size);
        maybe(t, "max_epochs", rc.train.max_epochs);
        maybe(t, "patience", rc.train.patience);
        maybe(t, "seed", rc.train.seed);
        maybe(t, "n_eval_negatives", rc.train.n_eval_negatives);
        maybe(t, "recall_ks", rc.train.recall_ks);
        maybe(t, "rank_metrics", rc.train.rank_metrics);
    }
    if (j.contains("data")) {
        const auto& d = j["data"];
        maybe(d, "train_csv", rc.train_csv);
        maybe(d, "val_csv", rc.val_csv);
        maybe(d, "test_csv", rc.test_csv);
    }
    maybe(j, "out_dir", rc.out_dir);
    return rc;
}

// vocab sizes have to cover every id seen anywhere, plus padding/oov rows
static void fit_vocab(ModelConfig& mc, const std::vector<const std::vector<Interaction>*>& sets) {
    long max_item = kOovId, max_cat = kOovId;
    for (const auto* s : sets)
        for (const auto& it : *s) {
            for (long v : it.items) max_item = std::max(max_item, v);
            for (long v : it.cats) max_cat = std::max(max_cat, v);
            max_item = std::max(max_item, it.target_item);
            max_cat = std::max(max_cat, it.target_cat);
        }
    if (mc.n_items < max_item + 1) mc.n_items = max_item + 1;
    if (mc.n_cats < max_cat + 1) mc.n_cats = max_cat + 1;
}

static void finalize_model_config(RunConfig& rc) {
    rc.model.pe.variant = pe_variant_from_string(rc.pe_name);
    rc.model.pe.d = rc.model.d();
    rc.model.validate();
    rc.train.validate();
}

static json report_json(const MetricsReport& rep) {
    json j;
    j["epoch"] = rep.epoch;
    j["seed"] = rep.seed;
    j["auc"] = rep.auc;
    j["gauc"] = rep.gauc;
    j["logloss"] = rep.logloss;
    for (const auto& [k, v] : rep.recall_at_k) j["recall_at_k"][std::to_string(k)] = v;
    for (const auto& [k, v] : rep.ndcg_at_k) j["ndcg_at_k"][std::to_string(k)] = v;
    return j;
}

int main(int argc, char** argv) {
    CLI::App app{"contextual position encoding toolkit for sequential recommendation"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "write a synthetic interaction dataset");
    SyntheticSpec spec;
    gen->add_option("--users", spec.n_users, "number of users");
    gen->add_option("--items", spec.n_items, "item vocabulary size");
    gen->add_option("--intents", spec.n_intents, "number of latent intents");
    gen->add_option("--seg-min", spec.seg_len_min, "shortest intent segment");
    gen->add_option("--seg-max", spec.seg_len_max, "longest intent segment");
    gen->add_option("--ctx-min", spec.ctx_len_min, "shortest context");
    gen->add_option("--ctx-max", spec.ctx_len_max, "longest context");
    gen->add_option("--seed", spec.seed, "generator seed");
    std::string gen_out = "data";
    gen->add_option("--out", gen_out, "output directory");

    // train
    auto* tr = app.add_subcommand("train", "train a model, writing checkpoint + metrics");
    tr->add_option("--config", config_path, "JSON run config")->required();
    tr->add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
        seed_set = true;
    });
    tr->add_option("--out", out_dir, "override the output directory");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    ev->add_option("--config", config_path, "JSON run config")->required();
    std::string ckpt_path, data_path;
    ev->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    ev->add_option("--data", data_path, "CSV dataset to score")->required();
    ev->add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
        seed_set = true;
    });
    ev->add_option("--out", out_dir, "write metrics JSON here as well");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string combo_filter;
    double tolerance = 1e-4;
    std::uint64_t gc_seed = 1;
    gc->add_option("--combo", combo_filter, "restrict to one backbone+variant, e.g. din+cape");
    gc->add_option("--tolerance", tolerance, "max allowed relative error");
    gc->add_option("--seed", gc_seed, "parameter init seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            if (spec.n_items % spec.n_intents != 0)
                throw std::invalid_argument("--items must be divisible by --intents");
            spec.items_per_intent = spec.n_items / spec.n_intents;
            spec.validate();
            fs::create_directories(gen_out);
            auto data = generate_synthetic(spec);
            const std::string csv = gen_out + "/data.csv";
            write_csv(csv, data);
            write_spec_sidecar(gen_out + "/data.spec.json", spec);
            std::cout << "wrote " << data.size() << " examples to " << csv << "\n";
            return 0;
        }

        if (*tr) {
            auto rc = load_run_config(config_path);
            if (seed_set) rc.train.seed = seed;
            if (!out_dir.empty()) rc.out_dir = out_dir;
            if (rc.train_csv.empty() || rc.val_csv.empty())
                throw std::invalid_argument("config must set data.train_csv and data.val_csv");
            auto train_data = parse_csv_dataset(rc.train_csv, rc.model.pe.n_max);
            auto val_data = parse_csv_dataset(rc.val_csv, rc.model.pe.n_max);
            fit_vocab(rc.model, {&train_data, &val_data});
            finalize_model_config(rc);

            Model model(rc.model, Rng::substream(rc.train.seed, "init").next_u64());
            auto result = train(model, train_data, val_data, rc.train);

            fs::create_directories(rc.out_dir);
            model.save(rc.out_dir + "/checkpoint.bin");
            {
                // resolved config so eval rebuilds the exact same shapes
                std::ifstream in(config_path);
                json j;
                in >> j;
                j["model"]["n_items"] = rc.model.n_items;
                j["model"]["n_cats"] = rc.model.n_cats;
                std::ofstream(rc.out_dir + "/config.json") << j.dump(2) << "\n";
            }
            std::ofstream jl(rc.out_dir + "/metrics.jsonl");
            for (const auto& rep : result.history)
                jl << metrics_jsonl_line(rep, utc_now()) << "\n";
            json rep;
            rep["best_epoch"] = result.best_epoch;
            rep["best_auc"] = result.best_auc;
            rep["seed"] = rc.train.seed;
            rep["final"] = report_json(result.history.back());
            std::ofstream(rc.out_dir + "/report.json") << rep.dump(2) << "\n";
            std::cout << rep.dump(2) << "\n";
            return 0;
        }

        if (*ev) {
            auto rc = load_run_config(config_path);
            if (seed_set) rc.train.seed = seed;
            auto data = parse_csv_dataset(data_path, rc.model.pe.n_max);
            fit_vocab(rc.model, {&data});
            finalize_model_config(rc);
            Model model(rc.model, 0);
            model.load(ckpt_path);
            auto rep = evaluate(model, data, rc.train);
            rep.seed = rc.train.seed;
            std::cout << report_json(rep).dump(2) << "\n";
            if (!out_dir.empty()) {
                fs::create_directories(out_dir);
                std::ofstream(out_dir + "/eval.json") << report_json(rep).dump(2) << "\n";
            }
            return 0;
        }

        if (*gc) {
            const std::vector<std::string> backbones = {"din", "sasrec"};
            const std::vector<PEVariant> variants = {PEVariant::None, PEVariant::Naive,
                                                     PEVariant::Rope, PEVariant::Cope,
                                                     PEVariant::Cape};
            bool all_pass = true;
            long ran = 0;
            for (const auto& b : backbones)
                for (auto v : variants) {
                    const std::string combo = b + "+" + to_string(v);
                    if (!combo_filter.empty() && combo != combo_filter) continue;
                    auto rep = gradcheck_combo(b, v, tolerance, gc_seed);
                    ++ran;
                    std::printf("%-14s params=%-4ld max_rel_err=%.3e  %s\n", rep.combo.c_str(),
                                rep.n_params, rep.max_rel_err, rep.pass ? "pass" : "FAIL");
                    all_pass = all_pass && rep.pass;
                }
            if (ran == 0)
                throw std::invalid_argument("no combination matches '" + combo_filter +
                                            "'; expected backbone+variant, e.g. din+cape");
            return all_pass ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
