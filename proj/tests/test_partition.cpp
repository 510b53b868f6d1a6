#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include <streamgate/partition.hpp>

using namespace streamgate;

namespace {

using Hists = std::map<std::string, LabelHistogram>;

LabelHistogram H(std::array<std::int64_t, 6> c) {
    LabelHistogram h;
    h.counts = c;
    return h;
}

Hists random_fixture(std::size_t sites, std::uint64_t seed) {
    Rng rng(seed);
    Hists out;
    for (std::size_t s = 0; s < sites; ++s) {
        LabelHistogram h;
        const int dominant = static_cast<int>(rng.below(6));
        const int n = 5 + static_cast<int>(rng.below(56));
        for (int k = 0; k < n; ++k) {
            const int l = rng.uniform() < 0.5 ? dominant : static_cast<int>(rng.below(6));
            ++h.counts[l];
        }
        char name[16];
        std::snprintf(name, sizeof name, "site%02zu", s);
        out[name] = h;
    }
    return out;
}

double prop_l1(const LabelHistogram& a, const LabelHistogram& b) {
    double acc = 0;
    for (int l = 0; l < 6; ++l) acc += std::abs(double(a.counts[l]) / a.total() - double(b.counts[l]) / b.total());
    return acc;
}

// Independent enumeration of the train-vs-rest stage: size within one site of
// floor(theta * gamma), at least two sites left over.
double oracle_first_stage(const Hists& hs, double theta) {
    std::vector<LabelHistogram> v;
    LabelHistogram pool;
    std::int64_t slack = 0;
    for (const auto& [_, h] : hs) {
        v.push_back(h);
        pool += h;
        slack = std::max(slack, h.total());
    }
    const auto target = static_cast<std::int64_t>(std::floor(theta * pool.total()));
    double best = std::numeric_limits<double>::infinity();
    const std::size_t n = v.size();
    for (std::uint64_t mask = 1; mask < (1ull << n); ++mask) {
        LabelHistogram u, t;
        std::size_t nu = 0, nt = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if ((mask >> i) & 1) { u += v[i]; ++nu; }
            else { t += v[i]; ++nt; }
        }
        if (nu < 1 || nt < 2 || std::abs(u.total() - target) > slack) continue;
        best = std::min(best, prop_l1(u, pool) + prop_l1(t, pool));
    }
    return best;
}

double oracle_second_stage(const Hists& hs, const std::vector<std::string>& rest_ids, double val_theta) {
    Hists rest;
    for (const auto& id : rest_ids) rest[id] = hs.at(id);
    std::vector<LabelHistogram> v;
    LabelHistogram pool;
    std::int64_t slack = 0;
    for (const auto& [_, h] : rest) {
        v.push_back(h);
        pool += h;
        slack = std::max(slack, h.total());
    }
    const auto target = static_cast<std::int64_t>(std::floor(val_theta * pool.total()));
    double best = std::numeric_limits<double>::infinity();
    for (std::uint64_t mask = 1; mask + 1 < (1ull << v.size()); ++mask) {
        LabelHistogram u, t;
        for (std::size_t i = 0; i < v.size(); ++i) ((mask >> i) & 1 ? u : t) += v[i];
        if (std::abs(u.total() - target) > slack) continue;
        best = std::min(best, prop_l1(u, pool) + prop_l1(t, pool));
    }
    return best;
}

void expect_valid(const PartitionSpec& spec, const Hists& hs) {
    std::set<std::string> all;
    for (const auto& [s, _] : hs) all.insert(s);
    EXPECT_TRUE(partition_problems(spec, all).empty());
    std::set<std::string> uni;
    for (const auto* v : {&spec.train_sites, &spec.test_sites, &spec.val_sites}) uni.insert(v->begin(), v->end());
    EXPECT_EQ(uni, all);
    EXPECT_EQ(spec.train_sites.size() + spec.test_sites.size() + spec.val_sites.size(), all.size());
}

}  // namespace

TEST(Histogram, TalliesLabels) {
    auto rec = [](int l) {
        ImageRecord r;
        r.id = "r";
        r.label = l;
        return r;
    };
    EXPECT_EQ(site_histogram({rec(1), rec(1), rec(6)}), H({2, 0, 0, 0, 0, 1}));
    EXPECT_EQ(site_histogram({}), H({0, 0, 0, 0, 0, 0}));
    EXPECT_EQ(site_histogram({rec(3), rec(3), rec(3)}), H({0, 0, 3, 0, 0, 0}));
    ImageRecord unl;
    unl.id = "u";
    EXPECT_THROW(site_histogram({unl}), ValidationError);
}

TEST(Divergence, Examples) {
    const auto a = H({3, 1, 0, 2, 5, 0});
    EXPECT_DOUBLE_EQ(divergence(a, a, DivergenceMetric::L1), 0.0);
    EXPECT_DOUBLE_EQ(divergence(a, a, DivergenceMetric::L2), 0.0);
    EXPECT_DOUBLE_EQ(divergence(H({4, 0, 0, 0, 0, 0}), H({0, 4, 0, 0, 0, 0}), DivergenceMetric::L1), 2.0);
    EXPECT_DOUBLE_EQ(divergence(H({4, 0, 0, 0, 0, 0}), H({0, 4, 0, 0, 0, 0}), DivergenceMetric::L2), std::sqrt(2.0));
    EXPECT_DOUBLE_EQ(divergence(H({2, 2, 0, 0, 0, 0}), H({1, 1, 0, 0, 0, 0})), 0.0);
    EXPECT_THROW(divergence(H({}), a), ValidationError);
}

TEST(Divergence, MatchesProportionFormula) {
    Rng rng(4);
    for (int t = 0; t < 200; ++t) {
        LabelHistogram a, b;
        for (int l = 0; l < 6; ++l) {
            a.counts[l] = static_cast<std::int64_t>(rng.below(20));
            b.counts[l] = static_cast<std::int64_t>(rng.below(20));
        }
        if (a.total() == 0 || b.total() == 0) continue;
        EXPECT_NEAR(divergence(a, b), prop_l1(a, b), 1e-12);
    }
}

TEST(Sizes, FloorArithmetic) {
    EXPECT_EQ(partition_sizes(0.8, 1000), (PartitionSizes{800, 200}));
    EXPECT_EQ(partition_sizes(0.5, 11), (PartitionSizes{5, 5}));
    EXPECT_EQ(partition_sizes(0.5, 2), (PartitionSizes{1, 1}));
    EXPECT_THROW(partition_sizes(1.0, 10), ValidationError);
    EXPECT_THROW(partition_sizes(0.0, 10), ValidationError);
}

TEST(RandomSearch, ExchangeableSitesReachZero) {
    const Hists hs{{"a", H({2, 2, 2, 0, 0, 0})}, {"b", H({2, 2, 2, 0, 0, 0})}, {"c", H({2, 2, 2, 0, 0, 0})}};
    PartitionConfig cfg;
    cfg.theta = 1.0 / 3.0;
    cfg.iterations = 100;
    const auto spec = random_search_partition(hs, cfg);
    expect_valid(spec, hs);
    EXPECT_DOUBLE_EQ(spec.objective, 0.0);
    EXPECT_DOUBLE_EQ(spec.train_divergence, 0.0);
    EXPECT_DOUBLE_EQ(spec.test_divergence, 0.0);
    EXPECT_DOUBLE_EQ(spec.val_divergence, 0.0);
}

TEST(RandomSearch, EightSitesMatchExhaustiveOptimum) {
    const Hists hs = random_fixture(8, 2024);
    PartitionConfig cfg;
    cfg.iterations = 10000;
    cfg.seed = 17;
    const auto spec = random_search_partition(hs, cfg);
    expect_valid(spec, hs);
    EXPECT_NEAR(spec.objective, oracle_first_stage(hs, cfg.theta), 1e-12);
    std::vector<std::string> rest = spec.test_sites;
    rest.insert(rest.end(), spec.val_sites.begin(), spec.val_sites.end());
    EXPECT_NEAR(spec.val_objective, oracle_second_stage(hs, rest, cfg.val_theta), 1e-12);
    const auto bf = brute_force_partition(hs, cfg.theta);
    EXPECT_NEAR(bf.objective, spec.objective, 1e-12);
    expect_valid(bf, hs);
}

TEST(RandomSearch, OtherSeedsWithinTwiceOptimum) {
    const Hists hs = random_fixture(8, 2024);
    const double opt = oracle_first_stage(hs, 0.7);
    for (std::uint64_t seed : {1ull, 99ull}) {
        PartitionConfig cfg;
        cfg.iterations = 10000;
        cfg.seed = seed;
        const auto spec = random_search_partition(hs, cfg);
        expect_valid(spec, hs);
        EXPECT_LE(spec.objective, 2.0 * opt + 1e-12);
    }
}

TEST(RandomSearch, OracleAgreementOnSmallFixtures) {
    for (std::size_t n = 4; n <= 10; ++n) {
        const Hists hs = random_fixture(n, 300 + n);
        PartitionConfig cfg;
        cfg.iterations = 10 * (1 << n);
        cfg.seed = n;
        const auto spec = random_search_partition(hs, cfg);
        expect_valid(spec, hs);
        const double opt = oracle_first_stage(hs, cfg.theta);
        if (std::isfinite(opt)) EXPECT_NEAR(spec.objective, opt, 1e-12) << n;
    }
}

TEST(RandomSearch, BestObjectiveNeverWorsensWithMoreIterations) {
    const Hists hs = random_fixture(8, 5);
    double prev = std::numeric_limits<double>::infinity();
    for (std::int64_t k = 1; k <= 300; k += 7) {
        PartitionConfig cfg;
        cfg.iterations = k;
        cfg.seed = 3;
        const auto spec = random_search_partition(hs, cfg);
        const bool feasible = std::none_of(spec.warnings.begin(), spec.warnings.end(),
                                           [](const std::string& w) { return w.starts_with("train split"); });
        if (!feasible) continue;
        EXPECT_LE(spec.objective, prev + 1e-15) << k;
        prev = spec.objective;
    }
    EXPECT_TRUE(std::isfinite(prev));
}

TEST(RandomSearch, DeterministicAndWorkerIndependent) {
    const Hists hs = random_fixture(12, 8);
    PartitionConfig cfg;
    cfg.iterations = 20000;
    cfg.seed = 123;
    const auto a = random_search_partition(hs, cfg, 1);
    const auto b = random_search_partition(hs, cfg, 1);
    const auto c = random_search_partition(hs, cfg, 4);
    EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
    EXPECT_EQ(to_json(a).dump(), to_json(c).dump());
}

TEST(RandomSearch, Preconditions) {
    PartitionConfig cfg;
    EXPECT_THROW(random_search_partition({{"a", H({1})}, {"b", H({1})}}, cfg), ValidationError);
    EXPECT_THROW(random_search_partition({{"a", H({1})}, {"b", H({1})}, {"c", H({})}}, cfg), ValidationError);
    cfg.theta = 1.5;
    EXPECT_THROW(random_search_partition(random_fixture(4, 1), cfg), ValidationError);
}

TEST(RandomSearch, OversizedSiteWarns) {
    const Hists hs{{"big", H({500, 0, 0, 0, 0, 0})}, {"b", H({5, 0, 0, 0, 0, 0})}, {"c", H({0, 5, 0, 0, 0, 0})},
                   {"d", H({0, 0, 5, 0, 0, 0})}};
    PartitionConfig cfg;
    cfg.iterations = 500;
    const auto spec = random_search_partition(hs, cfg);
    expect_valid(spec, hs);
    EXPECT_FALSE(spec.warnings.empty());
}

TEST(BruteForce, ForcedAssignmentAndTooManySites) {
    // three sites: train must take exactly one, and the rest split one/one
    const Hists hs{{"a", H({1, 0, 0, 0, 0, 0})}, {"b", H({0, 1, 0, 0, 0, 0})}, {"c", H({0, 0, 1, 0, 0, 0})}};
    const auto spec = brute_force_partition(hs, 0.3);
    expect_valid(spec, hs);
    EXPECT_EQ(spec.train_sites.size(), 1u);
    EXPECT_THROW(brute_force_partition(random_fixture(17, 1), 0.7), ValidationError);
}

TEST(PartitionJson, RoundTrip) {
    const Hists hs = random_fixture(9, 77);
    PartitionConfig cfg;
    cfg.iterations = 3000;
    cfg.seed = 5;
    cfg.metric = DivergenceMetric::L2;
    const auto spec = random_search_partition(hs, cfg);
    const auto back = partition_from_json(nlohmann::json::parse(to_json(spec).dump()));
    EXPECT_EQ(to_json(back).dump(), to_json(spec).dump());
    EXPECT_EQ(back.subset("train"), spec.subset("train"));
    EXPECT_THROW((void)spec.subset("nope"), ValidationError);
}

TEST(PartitionProblems, DetectsLeakage) {
    PartitionSpec s;
    s.train_sites = {"a", "b"};
    s.test_sites = {"b"};
    s.val_sites = {};
    const auto p = partition_problems(s, {"a", "b", "c"});
    EXPECT_GE(p.size(), 3u);
}
