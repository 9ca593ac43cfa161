#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cape/data.hpp"

using namespace cape;

namespace {

SyntheticSpec tiny_spec() {
    SyntheticSpec s;
    s.n_users = 50;
    s.n_intents = 4;
    s.items_per_intent = 10;
    s.n_items = 40;
    s.seg_len_min = 2;
    s.seg_len_max = 4;
    s.ctx_len_min = 8;
    s.ctx_len_max = 12;
    s.seed = 99;
    return s;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

struct TempDir {
    std::filesystem::path p;
    TempDir() {
        p = std::filesystem::temp_directory_path() /
            ("cape_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        std::filesystem::create_directories(p);
    }
    ~TempDir() { std::filesystem::remove_all(p); }
    std::string file(const std::string& name) const { return (p / name).string(); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

}  // namespace

TEST_CASE("synthetic generator: labels, intent rule, determinism") {
    auto spec = tiny_spec();
    auto data = generate_synthetic(spec);
    CHECK(data.size() == 100);  // one positive + one negative per user

    long positives = 0;
    for (const auto& it : data) {
        CHECK(it.items.size() == it.cats.size());
        CHECK(!it.items.empty());
        for (std::size_t j = 0; j < it.items.size(); ++j)
            CHECK(it.cats[j] == synthetic_category_of(spec, it.items[j]));
        // the context ends in a distractor run; the run before it carries
        // the signal intent
        const long tail_intent = synthetic_category_of(spec, it.items.back());
        std::size_t j = it.items.size();
        while (j > 0 && synthetic_category_of(spec, it.items[j - 1]) == tail_intent) --j;
        REQUIRE(j > 0);
        const long signal_intent = synthetic_category_of(spec, it.items[j - 1]);
        const long tgt_intent = synthetic_category_of(spec, it.target_item);
        CHECK(tgt_intent != tail_intent);  // last item is uninformative
        if (it.label == 1) {
            ++positives;
            CHECK(tgt_intent == signal_intent);  // positive rule holds exactly
        } else {
            CHECK(tgt_intent != signal_intent);
        }
    }
    CHECK(positives * 2 == static_cast<long>(data.size()));  // exact 50% balance

    auto again = generate_synthetic(spec);
    CHECK(again.size() == data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(again[i].items == data[i].items);
        CHECK(again[i].target_item == data[i].target_item);
    }
}

TEST_CASE("synthetic generator: single intent control and bad specs") {
    auto spec = tiny_spec();
    spec.n_intents = 1;
    spec.items_per_intent = 40;
    auto data = generate_synthetic(spec);
    for (const auto& it : data)
        CHECK(synthetic_category_of(spec, it.target_item) == 1);

    auto bad = tiny_spec();
    bad.items_per_intent = 0;
    CHECK_THROWS_AS(generate_synthetic(bad), std::invalid_argument);

    auto mismatched = tiny_spec();
    mismatched.n_items = 41;
    CHECK_THROWS_AS(generate_synthetic(mismatched), std::invalid_argument);
}

TEST_CASE("csv round trip is the identity; same seed gives identical bytes") {
    TempDir tmp;
    auto data = generate_synthetic(tiny_spec());
    const auto path = tmp.file("data.csv");
    write_csv(path, data);
    auto parsed = parse_csv_dataset(path, 100);
    CHECK(parsed.size() == data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(parsed[i].user_id == data[i].user_id);
        CHECK(parsed[i].items == data[i].items);
        CHECK(parsed[i].cats == data[i].cats);
        CHECK(parsed[i].target_item == data[i].target_item);
        CHECK(parsed[i].label == data[i].label);
    }
    const auto path2 = tmp.file("data2.csv");
    write_csv(path2, parsed);
    CHECK(slurp(path) == slurp(path2));

    write_csv(path2, generate_synthetic(tiny_spec()));
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("csv: empty file body, truncation to suffix, malformed rows") {
    TempDir tmp;
    const auto path = tmp.file("empty.csv");
    {
        std::ofstream f(path, std::ios::binary);
        f << "user_id,item_seq,cat_seq,target_item,target_cat,label\n";
    }
    CHECK(parse_csv_dataset(path).empty());

    const auto longpath = tmp.file("long.csv");
    {
        std::ofstream f(longpath, std::ios::binary);
        f << "user_id,item_seq,cat_seq,target_item,target_cat,label\n";
        f << "7,";
        for (int i = 1; i <= 150; ++i) f << (i > 1 ? " " : "") << i;
        f << ',';
        for (int i = 1; i <= 150; ++i) f << (i > 1 ? " " : "") << 1;
        f << ",5,1,1\n";
    }
    auto truncated = parse_csv_dataset(longpath, 100);
    REQUIRE(truncated.size() == 1);
    CHECK(truncated[0].items.size() == 100);
    CHECK(truncated[0].items.front() == 51);  // most recent items kept
    CHECK(truncated[0].items.back() == 150);

    const auto badpath = tmp.file("bad.csv");
    {
        std::ofstream f(badpath, std::ios::binary);
        f << "user_id,item_seq,cat_seq,target_item,target_cat,label\n";
        f << "1,1 2,1 1,3,1,1\n";
        f << "2,1 2,1 1,oops,1,0\n";
    }
    CHECK_THROWS_WITH_AS(parse_csv_dataset(badpath), doctest::Contains(":3"), std::runtime_error);
}

TEST_CASE("spec sidecar round trip") {
    TempDir tmp;
    auto spec = tiny_spec();
    const auto path = tmp.file("spec.json");
    write_spec_sidecar(path, spec);
    auto back = read_spec_sidecar(path);
    CHECK(back.n_users == spec.n_users);
    CHECK(back.n_intents == spec.n_intents);
    CHECK(back.ctx_len_max == spec.ctx_len_max);
    CHECK(back.seed == spec.seed);
}

TEST_CASE("make_batches: sizes, determinism, partition, padding") {
    auto data = generate_synthetic(tiny_spec());
    data.resize(5);
    auto batches = make_batches(data, 2, 1, 100);
    REQUIRE(batches.size() == 3);
    CHECK(batches[0].batch == 2);
    CHECK(batches[1].batch == 2);
    CHECK(batches[2].batch == 1);

    auto batches2 = make_batches(data, 2, 1, 100);
    CHECK(batches2[0].target_items == batches[0].target_items);

    std::multiset<long> seen, want;
    for (const auto& it : data) want.insert(it.target_item * 1000 + it.user_id);
    for (const auto& b : batches)
        for (long i = 0; i < b.batch; ++i) seen.insert(b.target_items[i] * 1000 + b.user_ids[i]);
    CHECK(seen == want);

    for (const auto& b : batches)
        for (long i = 0; i < b.batch; ++i)
            for (long j = 0; j < b.n; ++j) {
                const bool real = j < b.lengths[i];
                CHECK(b.mask[i * b.n + j] == (real ? 1 : 0));
                if (real)
                    CHECK(b.items[i * b.n + j] != kPaddingId);
                else
                    CHECK(b.items[i * b.n + j] == kPaddingId);
            }
}

TEST_CASE("negative_sample: forced pick, exclusion, determinism, exhaustion") {
    Rng rng(5);
    auto only = negative_sample({1, 2, 3, 4}, 6, 1, rng);
    CHECK(only == std::vector<long>{5});

    Rng r1(9), r2(9);
    for (int trial = 0; trial < 10000; ++trial) {
        auto s = negative_sample({3, 7, 11}, 40, 3, r1);
        for (long v : s) {
            CHECK(v != 3);
            CHECK(v != 7);
            CHECK(v != 11);
            CHECK(v >= 1);
            CHECK(v < 40);
        }
    }
    Rng ra(123), rb(123);
    CHECK(negative_sample({2}, 10, 4, ra) == negative_sample({2}, 10, 4, rb));

    Rng r3(1);
    CHECK_THROWS_AS(negative_sample({1, 2, 3, 4, 5}, 6, 1, r3), std::invalid_argument);
}

TEST_CASE("split_by_user keeps users whole") {
    auto data = generate_synthetic(tiny_spec());
    auto split = split_by_user(data, 4);
    CHECK(split.train.size() + split.val.size() + split.test.size() == data.size());
    std::set<long> tu, vu, su;
    for (const auto& i : split.train) tu.insert(i.user_id);
    for (const auto& i : split.val) vu.insert(i.user_id);
    for (const auto& i : split.test) su.insert(i.user_id);
    for (long u : vu) CHECK(!tu.count(u));
    for (long u : su) {
        CHECK(!tu.count(u));
        CHECK(!vu.count(u));
    }
    CHECK(tu.size() == 40);
    CHECK(vu.size() == 5);
}
