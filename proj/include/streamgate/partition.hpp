#pragma once
/**
 * partition.hpp
 *
 * Site-level train/test/validation split. Sites are atomic: every image of a
 * site lands in exactly one subset. A split is chosen to minimise
 *
 *     objective(u, t) = divergence(u, S) + divergence(t, S)
 *
 * where divergences compare pooled label proportions. The three-way split is
 * done as two sequential two-way splits (train vs rest, then test vs val on
 * the rest). random_search_partition approximates the argmin with keyed
 * random proposals; brute_force_partition enumerates it exactly.
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "catalog.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace streamgate {

struct LabelHistogram {
    std::array<std::int64_t, kNumLabels> counts{};

    [[nodiscard]] std::int64_t total() const noexcept {
        std::int64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }
    LabelHistogram& operator+=(const LabelHistogram& o) noexcept {
        for (int i = 0; i < kNumLabels; ++i) counts[i] += o.counts[i];
        return *this;
    }
    friend bool operator==(const LabelHistogram&, const LabelHistogram&) = default;
};

enum class DivergenceMetric { L1, L2 };

inline std::string_view to_string(DivergenceMetric m) { return m == DivergenceMetric::L1 ? "L1" : "L2"; }

inline DivergenceMetric metric_from_string(std::string_view s) {
    if (s == "L1" || s == "l1") return DivergenceMetric::L1;
    if (s == "L2" || s == "l2") return DivergenceMetric::L2;
    throw ValidationError("unknown divergence metric '" + std::string(s) + "'");
}

struct PartitionConfig {
    double theta = 0.7;
    double val_theta = 0.5;
    std::int64_t iterations = 10000;
    std::uint64_t seed = 0;
    DivergenceMetric metric = DivergenceMetric::L1;
    IndicatorMode indicator = IndicatorMode::Equal;

    void validate() const {
        if (!(theta > 0.0 && theta < 1.0)) throw ValidationError("partition: theta must lie in (0,1)");
        if (!(val_theta > 0.0 && val_theta < 1.0))
            throw ValidationError("partition: val_theta must lie in (0,1)");
        if (iterations < 1) throw ValidationError("partition: iterations must be >= 1");
    }
};

inline void from_json(const nlohmann::json& j, PartitionConfig& c) {
    c.theta = j.value("theta", c.theta);
    c.val_theta = j.value("val_theta", c.val_theta);
    c.iterations = j.value("iterations", c.iterations);
    c.seed = j.value("seed", c.seed);
    if (j.contains("metric")) c.metric = metric_from_string(j["metric"].get<std::string>());
    if (j.contains("indicator"))
        c.indicator = j["indicator"].get<std::string>() == "complement" ? IndicatorMode::Complement
                                                                         : IndicatorMode::Equal;
}

inline LabelHistogram site_histogram(const std::vector<ImageRecord>& records,
                                     IndicatorMode mode = IndicatorMode::Equal) {
    LabelHistogram h;
    for (const auto& r : records) {
        if (!r.label) throw ValidationError("site_histogram: unlabeled record '" + r.id + "'");
        for (int l = 1; l <= kNumLabels; ++l) h.counts[l - 1] += indicator(*r.label, l, mode);
    }
    return h;
}

inline std::map<std::string, LabelHistogram> site_histograms(const Catalog& cat,
                                                             IndicatorMode mode = IndicatorMode::Equal) {
    std::map<std::string, LabelHistogram> out;
    for (const auto& [site, recs] : cat.sites()) out[site] = site_histogram(recs, mode);
    return out;
}

/// Distance between the label proportions of two pooled histograms.
inline double divergence(const LabelHistogram& u, const LabelHistogram& t,
                         DivergenceMetric metric = DivergenceMetric::L1) {
    const double nu = static_cast<double>(u.total()), nt = static_cast<double>(t.total());
    if (nu <= 0.0 || nt <= 0.0) throw ValidationError("divergence: empty histogram");
    double acc = 0.0;
    for (int l = 0; l < kNumLabels; ++l) {
        const double d = u.counts[l] / nu - t.counts[l] / nt;
        acc += metric == DivergenceMetric::L1 ? std::abs(d) : d * d;
    }
    return metric == DivergenceMetric::L1 ? acc : std::sqrt(acc);
}

struct PartitionSizes {
    std::int64_t p_u = 0;
    std::int64_t p_t = 0;
    friend bool operator==(const PartitionSizes&, const PartitionSizes&) = default;
};

inline PartitionSizes partition_sizes(double theta, std::int64_t gamma) {
    if (!(theta > 0.0 && theta < 1.0)) throw ValidationError("partition_sizes: theta must lie in (0,1)");
    if (gamma < 2) throw ValidationError("partition_sizes: gamma must be >= 2");
    const double g = static_cast<double>(gamma);
    // the small nudge keeps exact products such as 0.2 * 1000 from flooring to 199
    return {static_cast<std::int64_t>(std::floor(theta * g + 1e-9)),
            static_cast<std::int64_t>(std::floor((1.0 - theta) * g + 1e-9))};
}

struct PartitionSpec {
    std::vector<std::string> train_sites, test_sites, val_sites;
    std::int64_t train_images = 0, test_images = 0, val_images = 0;
    PartitionSizes targets;      // first-stage p_u, p_t
    PartitionSizes val_targets;  // second-stage sizes on the non-train pool
    double train_divergence = 0.0, test_divergence = 0.0, val_divergence = 0.0;  // vs all sites
    double objective = 0.0;      // first stage: train vs rest
    double val_objective = 0.0;  // second stage: test vs val, against the rest pool
    LabelHistogram total_hist, train_hist, test_hist, val_hist;
    std::vector<std::string> warnings;
    std::uint64_t seed = 0;
    std::int64_t iterations = 0;
    DivergenceMetric metric = DivergenceMetric::L1;
    double theta = 0.0, val_theta = 0.0;

    [[nodiscard]] std::set<std::string> subset(std::string_view name) const {
        const auto& v = name == "train" ? train_sites : name == "test" ? test_sites : val_sites;
        if (name != "train" && name != "test" && name != "val" && name != "validation")
            throw ValidationError("unknown partition '" + std::string(name) + "'");
        return {v.begin(), v.end()};
    }
};

/// Disjointness, coverage and non-emptiness. Returns human-readable problems.
inline std::vector<std::string> partition_problems(const PartitionSpec& spec,
                                                   const std::set<std::string>& all_sites) {
    std::vector<std::string> problems;
    std::map<std::string, int> seen;
    for (const auto* v : {&spec.train_sites, &spec.test_sites, &spec.val_sites})
        for (const auto& s : *v) ++seen[s];
    for (const auto& [s, n] : seen) {
        if (n > 1) problems.push_back("site '" + s + "' appears in " + std::to_string(n) + " partitions");
        if (!all_sites.count(s)) problems.push_back("unknown site '" + s + "'");
    }
    for (const auto& s : all_sites)
        if (!seen.count(s)) problems.push_back("site '" + s + "' is unassigned");
    if (spec.train_sites.empty()) problems.push_back("train partition is empty");
    if (spec.test_sites.empty()) problems.push_back("test partition is empty");
    if (spec.val_sites.empty()) problems.push_back("validation partition is empty");
    return problems;
}

namespace detail {

struct SplitProblem {
    std::vector<LabelHistogram> hists;  // sites in id order
    LabelHistogram pool;
    std::int64_t target = 0;            // images wanted in the "u" side
    std::int64_t slack = 0;             // one whole site
    std::size_t min_rest = 1;           // sites required on the "t" side
    DivergenceMetric metric = DivergenceMetric::L1;
};

struct Candidate {
    std::vector<std::uint8_t> in_u;
    bool valid = false;       // structurally valid (nonempty sides)
    bool feasible = false;    // also meets the size target within slack
    std::int64_t deviation = 0;
    double objective = std::numeric_limits<double>::infinity();
};

inline Candidate evaluate(const SplitProblem& p, std::vector<std::uint8_t> in_u) {
    Candidate c;
    c.in_u = std::move(in_u);
    LabelHistogram u, t;
    std::size_t nu = 0, nt = 0;
    for (std::size_t i = 0; i < p.hists.size(); ++i) {
        if (c.in_u[i]) { u += p.hists[i]; ++nu; }
        else { t += p.hists[i]; ++nt; }
    }
    c.valid = nu >= 1 && nt >= p.min_rest && u.total() > 0 && t.total() > 0;
    if (!c.valid) return c;
    c.deviation = std::abs(u.total() - p.target);
    c.feasible = c.deviation <= p.slack;
    c.objective = divergence(u, p.pool, p.metric) + divergence(t, p.pool, p.metric);
    return c;
}

// Total order: feasible first, then (objective | deviation), then the
// lexicographically smallest member list.
inline bool better(const Candidate& a, const Candidate& b) {
    if (a.valid != b.valid) return a.valid;
    if (!a.valid) return false;
    if (a.feasible != b.feasible) return a.feasible;
    if (!a.feasible && a.deviation != b.deviation) return a.deviation < b.deviation;
    if (a.objective != b.objective) return a.objective < b.objective;
    std::vector<std::size_t> ma, mb;
    for (std::size_t i = 0; i < a.in_u.size(); ++i) {
        if (a.in_u[i]) ma.push_back(i);
        if (b.in_u[i]) mb.push_back(i);
    }
    return ma < mb;
}

inline std::vector<std::uint8_t> propose(std::size_t n, std::uint64_t seed, std::uint64_t stage,
                                         std::int64_t iteration) {
    Rng rng(seed, (stage << 48) ^ static_cast<std::uint64_t>(iteration));
    std::vector<std::uint8_t> in_u(n, 0);
    if (n < 2) return in_u;
    if (rng.coin()) {
        for (auto& b : in_u) b = rng.coin() ? 1 : 0;
    } else {
        // Subset size uniform in [1, n-1], members by partial Fisher-Yates.
        const std::size_t k = 1 + static_cast<std::size_t>(rng.below(n - 1));
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
            std::swap(idx[i], idx[j]);
            in_u[idx[i]] = 1;
        }
    }
    return in_u;
}

inline Candidate random_split(const SplitProblem& p, std::int64_t iterations, std::uint64_t seed,
                              std::uint64_t stage, int jobs) {
    constexpr std::int64_t kChunk = 4096;
    const std::size_t chunks = static_cast<std::size_t>((iterations + kChunk - 1) / kChunk);
    std::vector<Candidate> local(chunks);
    parallel_for(chunks, jobs, [&](std::size_t ci) {
        const std::int64_t lo = static_cast<std::int64_t>(ci) * kChunk;
        const std::int64_t hi = std::min(iterations, lo + kChunk);
        for (std::int64_t it = lo; it < hi; ++it) {
            Candidate c = evaluate(p, propose(p.hists.size(), seed, stage, it));
            if (better(c, local[ci])) local[ci] = std::move(c);
        }
    });
    Candidate best;
    for (auto& c : local)
        if (better(c, best)) best = std::move(c);
    return best;
}

inline Candidate exhaustive_split(const SplitProblem& p) {
    const std::size_t n = p.hists.size();
    Candidate best;
    for (std::uint64_t mask = 1; mask + 1 < (std::uint64_t{1} << n); ++mask) {
        std::vector<std::uint8_t> in_u(n);
        for (std::size_t i = 0; i < n; ++i) in_u[i] = (mask >> i) & 1u;
        Candidate c = evaluate(p, std::move(in_u));
        if (better(c, best)) best = std::move(c);
    }
    return best;
}

template <typename Splitter>
PartitionSpec two_stage_partition(const std::map<std::string, LabelHistogram>& site_hists,
                                  const PartitionConfig& cfg, Splitter&& split) {
    cfg.validate();
    if (site_hists.size() < 3) throw ValidationError("partition: need at least 3 sites");
    std::vector<std::string> ids;
    std::vector<LabelHistogram> hists;
    for (const auto& [s, h] : site_hists) {
        if (h.total() <= 0) throw ValidationError("partition: site '" + s + "' has an empty histogram");
        ids.push_back(s);
        hists.push_back(h);
    }

    PartitionSpec spec;
    spec.seed = cfg.seed;
    spec.iterations = cfg.iterations;
    spec.metric = cfg.metric;
    spec.theta = cfg.theta;
    spec.val_theta = cfg.val_theta;
    for (const auto& h : hists) spec.total_hist += h;

    auto make_problem = [&](const std::vector<std::size_t>& members, double theta, std::size_t min_rest) {
        SplitProblem p;
        p.metric = cfg.metric;
        p.min_rest = min_rest;
        for (std::size_t i : members) {
            p.hists.push_back(hists[i]);
            p.pool += hists[i];
            p.slack = std::max(p.slack, hists[i].total());
        }
        const PartitionSizes sz = partition_sizes(theta, p.pool.total());
        p.target = sz.p_u;
        return std::pair{p, sz};
    };

    std::vector<std::size_t> everyone(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) everyone[i] = i;
    auto [first, first_sizes] = make_problem(everyone, cfg.theta, 2);
    spec.targets = first_sizes;
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (hists[i].total() > first_sizes.p_t)
            spec.warnings.push_back("site '" + ids[i] + "' (" + std::to_string(hists[i].total()) +
                                    " images) is larger than the smaller target partition (" +
                                    std::to_string(first_sizes.p_t) + ")");

    // Baseline that always competes with the proposals: all but the trailing
    // `min_rest` sites go to the first side.
    auto valid_or_fallback = [](Candidate c, const SplitProblem& p) {
        std::vector<std::uint8_t> in_u(p.hists.size(), 1);
        for (std::size_t k = 0; k < p.min_rest && k < in_u.size(); ++k) in_u[in_u.size() - 1 - k] = 0;
        Candidate base = evaluate(p, std::move(in_u));
        return better(base, c) ? base : c;
    };

    const Candidate c1 = valid_or_fallback(split(first, std::uint64_t{1}), first);
    if (!c1.feasible) spec.warnings.push_back("train split: size target unreachable, best-effort split returned");
    spec.objective = c1.objective;

    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (c1.in_u[i]) { spec.train_sites.push_back(ids[i]); spec.train_hist += hists[i]; }
        else rest.push_back(i);
    }

    auto [second, second_sizes] = make_problem(rest, cfg.val_theta, 1);
    spec.val_targets = second_sizes;
    const Candidate c2 = valid_or_fallback(split(second, std::uint64_t{2}), second);
    if (!c2.feasible) spec.warnings.push_back("test/val split: size target unreachable, best-effort split returned");
    spec.val_objective = c2.objective;
    for (std::size_t k = 0; k < rest.size(); ++k) {
        const std::size_t i = rest[k];
        if (c2.in_u[k]) { spec.test_sites.push_back(ids[i]); spec.test_hist += hists[i]; }
        else { spec.val_sites.push_back(ids[i]); spec.val_hist += hists[i]; }
    }

    spec.train_images = spec.train_hist.total();
    spec.test_images = spec.test_hist.total();
    spec.val_images = spec.val_hist.total();
    spec.train_divergence = divergence(spec.train_hist, spec.total_hist, cfg.metric);
    spec.test_divergence = divergence(spec.test_hist, spec.total_hist, cfg.metric);
    spec.val_divergence = divergence(spec.val_hist, spec.total_hist, cfg.metric);
    return spec;
}

}  // namespace detail

/// Randomized approximation of the argmin. Proposal i is drawn from a stream
/// keyed by (seed, stage, i), so the outcome is the same for any `jobs` and a
/// longer run only ever improves on a shorter one with the same seed.
inline PartitionSpec random_search_partition(const std::map<std::string, LabelHistogram>& site_hists,
                                             const PartitionConfig& cfg, int jobs = 1) {
    return detail::two_stage_partition(site_hists, cfg, [&](const detail::SplitProblem& p, std::uint64_t stage) {
        return detail::random_split(p, cfg.iterations, cfg.seed, stage, jobs);
    });
}

inline constexpr std::size_t kBruteForceMaxSites = 16;

/// Exact argmin by enumeration of every site subset. Same feasibility rule and
/// tie-break as the random search.
inline PartitionSpec brute_force_partition(const std::map<std::string, LabelHistogram>& site_hists,
                                           double theta, double val_theta = 0.5,
                                           DivergenceMetric metric = DivergenceMetric::L1) {
    if (site_hists.size() > kBruteForceMaxSites)
        throw ValidationError("brute_force_partition: too many sites (max 16)");
    PartitionConfig cfg;
    cfg.theta = theta;
    cfg.val_theta = val_theta;
    cfg.metric = metric;
    cfg.iterations = 1;
    return detail::two_stage_partition(site_hists, cfg, [](const detail::SplitProblem& p, std::uint64_t) {
        return detail::exhaustive_split(p);
    });
}

inline nlohmann::ordered_json to_json(const PartitionSpec& s) {
    auto hist = [](const LabelHistogram& h) { return nlohmann::ordered_json(h.counts); };
    nlohmann::ordered_json j;
    j["seed"] = s.seed;
    j["iterations"] = s.iterations;
    j["theta"] = s.theta;
    j["val_theta"] = s.val_theta;
    j["metric"] = to_string(s.metric);
    j["train_sites"] = s.train_sites;
    j["test_sites"] = s.test_sites;
    j["val_sites"] = s.val_sites;
    j["sizes"] = {{"train", s.train_images}, {"test", s.test_images}, {"val", s.val_images}};
    j["targets"] = {{"p_u", s.targets.p_u}, {"p_t", s.targets.p_t},
                    {"test", s.val_targets.p_u}, {"val", s.val_targets.p_t}};
    j["divergence"] = {{"train", s.train_divergence}, {"test", s.test_divergence}, {"val", s.val_divergence}};
    j["objective"] = {{"train_vs_rest", s.objective}, {"test_vs_val", s.val_objective}};
    j["histograms"] = {{"total", hist(s.total_hist)}, {"train", hist(s.train_hist)},
                       {"test", hist(s.test_hist)},   {"val", hist(s.val_hist)}};
    j["warnings"] = s.warnings;
    return j;
}

inline PartitionSpec partition_from_json(const nlohmann::json& j) {
    PartitionSpec s;
    auto hist = [](const nlohmann::json& a) {
        LabelHistogram h;
        for (int i = 0; i < kNumLabels; ++i) h.counts[i] = a.at(i).get<std::int64_t>();
        return h;
    };
    s.seed = j.at("seed").get<std::uint64_t>();
    s.iterations = j.at("iterations").get<std::int64_t>();
    s.theta = j.at("theta").get<double>();
    s.val_theta = j.at("val_theta").get<double>();
    s.metric = metric_from_string(j.at("metric").get<std::string>());
    s.train_sites = j.at("train_sites").get<std::vector<std::string>>();
    s.test_sites = j.at("test_sites").get<std::vector<std::string>>();
    s.val_sites = j.at("val_sites").get<std::vector<std::string>>();
    s.train_images = j.at("sizes").at("train").get<std::int64_t>();
    s.test_images = j.at("sizes").at("test").get<std::int64_t>();
    s.val_images = j.at("sizes").at("val").get<std::int64_t>();
    s.targets = {j.at("targets").at("p_u").get<std::int64_t>(), j.at("targets").at("p_t").get<std::int64_t>()};
    s.val_targets = {j.at("targets").at("test").get<std::int64_t>(), j.at("targets").at("val").get<std::int64_t>()};
    s.train_divergence = j.at("divergence").at("train").get<double>();
    s.test_divergence = j.at("divergence").at("test").get<double>();
    s.val_divergence = j.at("divergence").at("val").get<double>();
    s.objective = j.at("objective").at("train_vs_rest").get<double>();
    s.val_objective = j.at("objective").at("test_vs_val").get<double>();
    s.total_hist = hist(j.at("histograms").at("total"));
    s.train_hist = hist(j.at("histograms").at("train"));
    s.test_hist = hist(j.at("histograms").at("test"));
    s.val_hist = hist(j.at("histograms").at("val"));
    s.warnings = j.at("warnings").get<std::vector<std::string>>();
    return s;
}

}  // namespace streamgate
