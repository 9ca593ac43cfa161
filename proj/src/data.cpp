#include "cape/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace cape {

void SyntheticSpec::validate() const {
    if (n_users < 1) throw std::invalid_argument("SyntheticSpec: n_users must be >= 1");
    if (n_intents < 1) throw std::invalid_argument("SyntheticSpec: n_intents must be >= 1");
    if (items_per_intent < 1)
        throw std::invalid_argument("SyntheticSpec: items_per_intent must be >= 1");
    if (n_items != n_intents * items_per_intent)
        throw std::invalid_argument("SyntheticSpec: intents must partition the vocabulary: n_items=" +
                                    std::to_string(n_items) + " != n_intents*items_per_intent=" +
                                    std::to_string(n_intents * items_per_intent));
    if (seg_len_min < 1 || seg_len_max < seg_len_min)
        throw std::invalid_argument("SyntheticSpec: empty segment length range");
    if (ctx_len_min < 1 || ctx_len_max < ctx_len_min)
        throw std::invalid_argument("SyntheticSpec: empty context length range");
}

long synthetic_category_of(const SyntheticSpec& spec, long item_id) {
    // items 1..items_per_intent belong to intent 0, and so on
    return (item_id - 1) / spec.items_per_intent + 1;
}

std::vector<Interaction> generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng = Rng::substream(spec.seed, "synthetic");
    std::vector<Interaction> out;
    out.reserve(static_cast<std::size_t>(spec.n_users) * 2);

    auto item_of_intent = [&](long intent) {
        return intent * spec.items_per_intent + rng.randint(1, spec.items_per_intent);
    };

    for (long u = 0; u < spec.n_users; ++u) {
        const long ctx_len = rng.randint(spec.ctx_len_min, spec.ctx_len_max);
        // the context ends in a short distractor run so the signal segment
        // can only be found by counting back from the end, not by looking
        // at the final item alone
        const long tail_len =
            spec.n_intents > 1 ? std::min<long>(rng.randint(1, 3), ctx_len - 1) : 0;
        const long main_len = ctx_len - tail_len;
        std::vector<long> items, cats;
        std::vector<long> segment_intents;
        long last_intent = -1;
        while (static_cast<long>(items.size()) < main_len) {
            long intent = rng.randint(0, spec.n_intents - 1);
            if (spec.n_intents > 1)
                while (intent == last_intent) intent = rng.randint(0, spec.n_intents - 1);
            last_intent = intent;
            segment_intents.push_back(intent);
            const long seg = rng.randint(spec.seg_len_min, spec.seg_len_max);
            for (long s = 0; s < seg && static_cast<long>(items.size()) < main_len; ++s) {
                const long it = item_of_intent(intent);
                items.push_back(it);
                cats.push_back(synthetic_category_of(spec, it));
            }
        }
        const long pos_intent = segment_intents.back();

        long tail_intent = -1;
        if (tail_len > 0) {
            tail_intent = rng.randint(0, spec.n_intents - 1);
            while (tail_intent == pos_intent) tail_intent = rng.randint(0, spec.n_intents - 1);
            segment_intents.push_back(tail_intent);
            for (long s = 0; s < tail_len; ++s) {
                const long it = item_of_intent(tail_intent);
                items.push_back(it);
                cats.push_back(synthetic_category_of(spec, it));
            }
        }

        // negative intent: prefer one that actually occurs in the context,
        // so set membership alone cannot separate the classes; the tail
        // intent is excluded so the last item stays uninformative for both
        // classes
        long neg_intent = pos_intent;
        if (spec.n_intents > 1) {
            std::vector<long> in_ctx;
            for (long si : segment_intents)
                if (si != pos_intent && si != tail_intent) in_ctx.push_back(si);
            if (!in_ctx.empty()) {
                neg_intent = in_ctx[rng.randint(0, static_cast<long>(in_ctx.size()) - 1)];
            } else {
                // avoid the tail intent too when a third choice exists
                const bool avoid_tail = spec.n_intents > 2;
                neg_intent = rng.randint(0, spec.n_intents - 1);
                while (neg_intent == pos_intent || (avoid_tail && neg_intent == tail_intent))
                    neg_intent = rng.randint(0, spec.n_intents - 1);
            }
        }

        Interaction pos;
        pos.user_id = u + 1;
        pos.items = items;
        pos.cats = cats;
        pos.target_item = item_of_intent(pos_intent);
        pos.target_cat = synthetic_category_of(spec, pos.target_item);
        pos.label = 1;

        Interaction neg = pos;
        neg.target_item = item_of_intent(neg_intent);
        neg.target_cat = synthetic_category_of(spec, neg.target_item);
        neg.label = 0;

        out.push_back(std::move(pos));
        out.push_back(std::move(neg));
    }
    return out;
}

namespace {

std::string join_ids(const std::vector<long>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) os << ' ';
        os << v[i];
    }
    return os.str();
}

std::vector<long> split_ids(const std::string& s, const std::string& path, std::size_t line) {
    std::vector<long> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) {
        try {
            out.push_back(std::stol(tok));
        } catch (const std::exception&) {
            throw std::runtime_error(path + ":" + std::to_string(line) +
                                     ": malformed id '" + tok + "'");
        }
    }
    return out;
}

}  // namespace

void write_csv(const std::string& path, const std::vector<Interaction>& data) {
    std::ofstream f(path, std::ios::binary);  // LF endings everywhere
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << "user_id,item_seq,cat_seq,target_item,target_cat,label\n";
    for (const auto& it : data)
        f << it.user_id << ',' << join_ids(it.items) << ',' << join_ids(it.cats) << ','
          << it.target_item << ',' << it.target_cat << ',' << it.label << '\n';
    if (!f) throw std::runtime_error("write failed: " + path);
}

std::vector<Interaction> parse_csv_dataset(const std::string& path, long n_max) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::vector<Interaction> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1) {
            if (line != "user_id,item_seq,cat_seq,target_item,target_cat,label")
                throw std::runtime_error(path + ":1: unexpected header '" + line + "'");
            continue;
        }
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::istringstream is(line);
        std::string field;
        while (std::getline(is, field, ',')) fields.push_back(field);
        if (fields.size() != 6)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 6 fields, got " +
                                     std::to_string(fields.size()));
        try {
            Interaction it;
            it.user_id = std::stol(fields[0]);
            it.items = split_ids(fields[1], path, lineno);
            it.cats = split_ids(fields[2], path, lineno);
            it.target_item = std::stol(fields[3]);
            it.target_cat = std::stol(fields[4]);
            it.label = std::stoi(fields[5]);
            if (it.items.empty() || it.items.size() != it.cats.size())
                throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                         ": item/category sequences must be parallel and non-empty");
            if (it.label != 0 && it.label != 1)
                throw std::runtime_error(path + ":" + std::to_string(lineno) + ": label must be 0 or 1");
            if (static_cast<long>(it.items.size()) > n_max) {
                // keep the most recent items
                it.items.erase(it.items.begin(), it.items.end() - n_max);
                it.cats.erase(it.cats.begin(), it.cats.end() - n_max);
            }
            out.push_back(std::move(it));
        } catch (const std::runtime_error&) {
            throw;
        } catch (const std::exception&) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed row");
        }
    }
    return out;
}

void write_spec_sidecar(const std::string& path, const SyntheticSpec& spec) {
    nlohmann::json j = {
        {"n_users", spec.n_users},
        {"n_items", spec.n_items},
        {"n_intents", spec.n_intents},
        {"items_per_intent", spec.items_per_intent},
        {"segment_length_range", {spec.seg_len_min, spec.seg_len_max}},
        {"context_length_range", {spec.ctx_len_min, spec.ctx_len_max}},
        {"seed", spec.seed},
    };
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << j.dump(2) << '\n';
}

SyntheticSpec read_spec_sidecar(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open: " + path);
    nlohmann::json j;
    f >> j;
    SyntheticSpec spec;
    spec.n_users = j.at("n_users");
    spec.n_items = j.at("n_items");
    spec.n_intents = j.at("n_intents");
    spec.items_per_intent = j.at("items_per_intent");
    spec.seg_len_min = j.at("segment_length_range")[0];
    spec.seg_len_max = j.at("segment_length_range")[1];
    spec.ctx_len_min = j.at("context_length_range")[0];
    spec.ctx_len_max = j.at("context_length_range")[1];
    spec.seed = j.at("seed");
    return spec;
}

std::vector<ContextBatch> make_batches(const std::vector<Interaction>& data, long batch_size,
                                       std::uint64_t shuffle_seed, long n_max, bool shuffle) {
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (shuffle) {
        Rng rng = Rng::substream(shuffle_seed, "shuffle");
        rng.shuffle(order);
    }
    std::vector<ContextBatch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
        ContextBatch b;
        b.batch = static_cast<long>(end - start);
        long n = 1;
        for (std::size_t i = start; i < end; ++i)
            n = std::max(n, std::min(n_max, static_cast<long>(data[order[i]].items.size())));
        b.n = n;
        b.items.assign(b.batch * n, kPaddingId);
        b.cats.assign(b.batch * n, kPaddingId);
        b.mask.assign(b.batch * n, 0);
        for (std::size_t i = start; i < end; ++i) {
            const Interaction& it = data[order[i]];
            const long row = static_cast<long>(i - start);
            long len = static_cast<long>(it.items.size());
            long skip = 0;
            if (len > n_max) {
                skip = len - n_max;  // keep the suffix
                len = n_max;
            }
            for (long j = 0; j < len; ++j) {
                b.items[row * n + j] = it.items[skip + j];
                b.cats[row * n + j] = it.cats[skip + j];
                b.mask[row * n + j] = 1;
            }
            b.lengths.push_back(len);
            b.target_items.push_back(it.target_item);
            b.target_cats.push_back(it.target_cat);
            b.labels.push_back(static_cast<double>(it.label));
            b.user_ids.push_back(it.user_id);
        }
        out.push_back(std::move(b));
    }
    return out;
}

std::vector<long> negative_sample(const std::vector<long>& history, long vocab, long k, Rng& rng) {
    std::set<long> banned(history.begin(), history.end());
    banned.insert(kPaddingId);
    std::vector<long> pool;
    for (long v = 1; v < vocab; ++v)
        if (!banned.count(v)) pool.push_back(v);
    if (static_cast<long>(pool.size()) < k)
        throw std::invalid_argument("negative_sample: need " + std::to_string(k) +
                                    " candidates but only " + std::to_string(pool.size()) +
                                    " items outside the history");
    std::vector<long> out;
    for (long i = 0; i < k; ++i) {
        const long idx = rng.randint(0, static_cast<long>(pool.size()) - 1);
        out.push_back(pool[idx]);
        pool.erase(pool.begin() + idx);
    }
    return out;
}

DataSplit split_by_user(const std::vector<Interaction>& data, std::uint64_t seed) {
    std::set<long> users;
    for (const auto& it : data) users.insert(it.user_id);
    std::vector<long> ids(users.begin(), users.end());
    Rng rng = Rng::substream(seed, "user-split");
    rng.shuffle(ids);
    const std::size_t n = ids.size();
    const std::size_t n_train = n * 8 / 10;
    const std::size_t n_val = n / 10;
    std::set<long> train_u(ids.begin(), ids.begin() + n_train);
    std::set<long> val_u(ids.begin() + n_train, ids.begin() + n_train + n_val);
    DataSplit out;
    for (const auto& it : data) {
        if (train_u.count(it.user_id)) out.train.push_back(it);
        else if (val_u.count(it.user_id)) out.val.push_back(it);
        else out.test.push_back(it);
    }
    return out;
}

}  // namespace cape
