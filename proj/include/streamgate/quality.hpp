#pragma once
/**
 * quality.hpp
 *
 * The seven image-quality filters: exposure (over/under), missing color,
 * blur, lens flare, off-schedule trigger shots and unreliable timestamps.
 * Per-image filters are pure functions of the pixels; the trigger and
 * timestamp filters look at a whole site sequence.
 */

#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "catalog.hpp"
#include "color.hpp"
#include "image.hpp"
#include "image_io.hpp"
#include "parallel.hpp"

namespace streamgate {

struct QualityConfig {
    double over_mean_luma = 235.0;
    double over_clip_frac = 0.30;    // fraction of luma samples >= 250
    double under_mean_luma = 20.0;
    double under_clip_frac = 0.30;   // fraction of luma samples <= 5
    double chroma_std_max = 2.0;
    double chroma_mean_offset_max = 4.0;
    double blur_lapvar_min = 100.0;
    double flare_blob_frac = 0.05;
    double flare_luma_min = 250.0;
    double schedule_tolerance_min = 5.0;

    void validate() const {
        auto positive = [](double v, const char* name) {
            if (!(v > 0.0)) throw ValidationError(std::string("quality config: ") + name + " must be > 0");
        };
        auto fraction = [](double v, const char* name) {
            if (!(v > 0.0 && v < 1.0))
                throw ValidationError(std::string("quality config: ") + name + " must be in (0,1)");
        };
        positive(over_mean_luma, "over_mean_luma");
        positive(under_mean_luma, "under_mean_luma");
        positive(chroma_std_max, "chroma_std_max");
        positive(chroma_mean_offset_max, "chroma_mean_offset_max");
        positive(blur_lapvar_min, "blur_lapvar_min");
        positive(flare_luma_min, "flare_luma_min");
        positive(schedule_tolerance_min, "schedule_tolerance");
        fraction(over_clip_frac, "over_clip_frac");
        fraction(under_clip_frac, "under_clip_frac");
        fraction(flare_blob_frac, "flare_blob_frac");
    }
};

inline void to_json(nlohmann::json& j, const QualityConfig& c) {
    j = nlohmann::json{{"over_mean_luma", c.over_mean_luma},
                       {"over_clip_frac", c.over_clip_frac},
                       {"under_mean_luma", c.under_mean_luma},
                       {"under_clip_frac", c.under_clip_frac},
                       {"chroma_std_max", c.chroma_std_max},
                       {"chroma_mean_offset_max", c.chroma_mean_offset_max},
                       {"blur_lapvar_min", c.blur_lapvar_min},
                       {"flare_blob_frac", c.flare_blob_frac},
                       {"flare_luma_min", c.flare_luma_min},
                       {"schedule_tolerance", c.schedule_tolerance_min}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, QualityConfig& c) {
    const std::map<std::string, double*> slots = {
        {"over_mean_luma", &c.over_mean_luma},   {"over_clip_frac", &c.over_clip_frac},
        {"under_mean_luma", &c.under_mean_luma}, {"under_clip_frac", &c.under_clip_frac},
        {"chroma_std_max", &c.chroma_std_max},   {"chroma_mean_offset_max", &c.chroma_mean_offset_max},
        {"blur_lapvar_min", &c.blur_lapvar_min}, {"flare_blob_frac", &c.flare_blob_frac},
        {"flare_luma_min", &c.flare_luma_min},   {"schedule_tolerance", &c.schedule_tolerance_min}};
    for (const auto& [key, value] : j.items()) {
        const auto it = slots.find(key);
        if (it == slots.end()) throw ValidationError("quality config: unknown key '" + key + "'");
        *it->second = value.get<double>();
    }
}

// ---------------------------------------------------------------------------
// Per-image measures

struct ExposureStats {
    double mean_luma = 0.0;
    double frac_bright = 0.0;  // luma >= 250
    double frac_dark = 0.0;    // luma <= 5
};

inline ExposureStats exposure_stats(const Image& img) {
    if (img.empty() || img.pixel_count() == 0) throw ValidationError("exposure_stats: empty image");
    const Image y = luma_of(img);
    std::uint64_t sum = 0, bright = 0, dark = 0;
    for (std::uint8_t v : y.pixels) {
        sum += v;
        bright += v >= 250;
        dark += v <= 5;
    }
    const double n = static_cast<double>(y.pixels.size());
    return {static_cast<double>(sum) / n, static_cast<double>(bright) / n, static_cast<double>(dark) / n};
}

struct ChromaStats {
    double std_cr = 0.0, std_cb = 0.0;
    double mean_offset_cr = 0.0, mean_offset_cb = 0.0;  // mean |C - 128|
};

inline ChromaStats chroma_stats(const Image& img) {
    const Image ycc = img.colorspace == ColorSpace::YCrCb ? img : rgb_to_ycrcb(img);
    const std::size_t n = ycc.pixel_count();
    double s[2] = {0, 0}, s2[2] = {0, 0}, off[2] = {0, 0};
    for (std::size_t i = 0; i < n; ++i)
        for (int k = 0; k < 2; ++k) {
            const double v = ycc.pixels[3 * i + 1 + k];
            s[k] += v;
            s2[k] += v * v;
            off[k] += std::abs(v - 128.0);
        }
    const double dn = static_cast<double>(n);
    auto sd = [&](int k) { return std::sqrt(std::max(0.0, s2[k] / dn - (s[k] / dn) * (s[k] / dn))); };
    return {sd(0), sd(1), off[0] / dn, off[1] / dn};
}

/// Achromatic test: both chroma planes flat and centred on neutral.
inline bool is_grayscale(const Image& img, const QualityConfig& cfg = {}) {
    if (img.channels == 1) return true;
    if (img.empty()) throw ValidationError("is_grayscale: empty image");
    const ChromaStats c = chroma_stats(img);
    return c.std_cr < cfg.chroma_std_max && c.std_cb < cfg.chroma_std_max &&
           c.mean_offset_cr < cfg.chroma_mean_offset_max && c.mean_offset_cb < cfg.chroma_mean_offset_max;
}

/// Variance of the 4-neighbour Laplacian of luma over interior pixels.
inline double blur_score(const Image& img) {
    if (img.height < 3 || img.width < 3) throw ValidationError("blur_score: image smaller than 3x3 kernel");
    const Image y = luma_of(img);
    double sum = 0.0, sum2 = 0.0;
    for (int r = 1; r < y.height - 1; ++r)
        for (int c = 1; c < y.width - 1; ++c) {
            const double lap = double(y.at(r - 1, c)) + y.at(r + 1, c) + y.at(r, c - 1) +
                               y.at(r, c + 1) - 4.0 * y.at(r, c);
            sum += lap;
            sum2 += lap * lap;
        }
    const double n = double(y.height - 2) * double(y.width - 2);
    const double mean = sum / n;
    return std::max(0.0, sum2 / n - mean * mean);
}

/// Fraction of the frame covered by the largest 4-connected region whose luma
/// is at least cfg.flare_luma_min.
inline double flare_score(const Image& img, const QualityConfig& cfg = {}) {
    if (img.empty() || img.pixel_count() == 0) throw ValidationError("flare_score: empty image");
    const Image y = luma_of(img);
    const int h = y.height, w = y.width;
    std::vector<std::uint8_t> seen(y.pixels.size(), 0);
    std::vector<int> stack;
    std::size_t best = 0;
    for (int start = 0; start < h * w; ++start) {
        if (seen[start] || y.pixels[start] < cfg.flare_luma_min) continue;
        std::size_t size = 0;
        stack.assign(1, start);
        seen[start] = 1;
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            ++size;
            const int r = p / w, c = p % w;
            const int nbr[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
            for (const auto& q : nbr) {
                if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
                const int idx = q[0] * w + q[1];
                if (!seen[idx] && y.pixels[idx] >= cfg.flare_luma_min) {
                    seen[idx] = 1;
                    stack.push_back(idx);
                }
            }
        }
        best = std::max(best, size);
    }
    return static_cast<double>(best) / static_cast<double>(h * w);
}

/// Pixel-based filters (1)-(5).
inline QualityFlags assess_image(const Image& img, const QualityConfig& cfg) {
    QualityFlags f;
    const ExposureStats e = exposure_stats(img);
    f.overexposed = e.mean_luma > cfg.over_mean_luma || e.frac_bright > cfg.over_clip_frac;
    f.underexposed = e.mean_luma < cfg.under_mean_luma || e.frac_dark > cfg.under_clip_frac;
    f.grayscale = is_grayscale(img, cfg);
    f.blurred = img.height < 3 || img.width < 3 || blur_score(img) < cfg.blur_lapvar_min;
    f.flared = flare_score(img, cfg) > cfg.flare_blob_frac;
    return f;
}

// ---------------------------------------------------------------------------
// Sequence filters

/// Flags off-schedule frames in one time-ordered site sequence. Within each
/// clock-hour slot only the frame closest to the top of the hour survives;
/// any frame more than the tolerance past the hour is flagged as well.
inline std::vector<bool> detect_triggered(const std::vector<ImageRecord>& site_records,
                                          const QualityConfig& cfg = {}) {
    using namespace std::chrono;
    std::vector<bool> flagged(site_records.size(), false);
    const auto tolerance = duration<double>(cfg.schedule_tolerance_min * 60.0);
    std::map<sys_seconds, std::size_t> slot_keeper;
    for (std::size_t i = 0; i < site_records.size(); ++i) {
        const auto t = site_records[i].captured_at;
        const auto slot = floor<hours>(t);
        const auto offset = t - slot;
        if (duration<double>(offset) > tolerance) flagged[i] = true;
        auto [it, inserted] = slot_keeper.try_emplace(slot, i);
        if (inserted) continue;
        const auto keeper_offset = site_records[it->second].captured_at - slot;
        if (offset < keeper_offset) {
            flagged[it->second] = true;
            it->second = i;
        } else {
            flagged[i] = true;
        }
    }
    return flagged;
}

// ---------------------------------------------------------------------------
// Gate

using ImageLoader = std::function<Image(const ImageRecord&)>;

inline Image load_record_image(const ImageRecord& r) { return read_image(r.path); }

struct FlagCounts {
    std::size_t total = 0;
    std::size_t passed = 0;
    std::size_t load_errors = 0;
    std::array<std::size_t, 7> flags{};

    void add(const QualityFlags& q) {
        const auto a = q.as_array();
        for (std::size_t i = 0; i < a.size(); ++i) flags[i] += a[i];
    }
    [[nodiscard]] std::size_t count(std::string_view name) const {
        for (std::size_t i = 0; i < QualityFlags::names.size(); ++i)
            if (QualityFlags::names[i] == name) return flags[i];
        return 0;
    }
    friend bool operator==(const FlagCounts&, const FlagCounts&) = default;
};

struct QualityReport {
    std::map<std::string, FlagCounts> per_site;
    FlagCounts totals;
    std::vector<IngestError> load_errors;

    [[nodiscard]] nlohmann::ordered_json to_json() const {
        auto counts_json = [](const FlagCounts& c) {
            nlohmann::ordered_json j;
            j["total"] = c.total;
            j["passed"] = c.passed;
            j["load_errors"] = c.load_errors;
            for (std::size_t i = 0; i < c.flags.size(); ++i) j[std::string(QualityFlags::names[i])] = c.flags[i];
            return j;
        };
        nlohmann::ordered_json j;
        j["totals"] = counts_json(totals);
        auto sites = nlohmann::ordered_json::object();
        for (const auto& [s, c] : per_site) sites[s] = counts_json(c);
        j["per_site"] = std::move(sites);
        auto errs = nlohmann::ordered_json::array();
        for (const auto& e : load_errors) errs.push_back({{"id", e.path}, {"reason", e.reason}});
        j["load_errors"] = std::move(errs);
        return j;
    }
};

struct GateResult {
    Catalog passing;
    Catalog flagged;  // every input record with its computed flags
    QualityReport report;
};

/// Runs all seven filters. Flags already present on a record are kept, so a
/// gate can be layered on top of a previous one. The input is not modified.
inline GateResult apply_quality_gate(const Catalog& cat, const QualityConfig& cfg,
                                     const ImageLoader& loader, Timestamp now, int jobs = 1) {
    cfg.validate();
    std::vector<ImageRecord> all = cat.records();
    std::vector<std::optional<std::string>> load_error(all.size());

    parallel_for(all.size(), jobs, [&](std::size_t i) {
        try {
            const Image img = loader(all[i]);
            all[i].quality |= assess_image(img, cfg);
        } catch (const std::exception& e) {
            load_error[i] = e.what();
        }
    });

    std::map<std::string, std::size_t> index_of;
    for (std::size_t i = 0; i < all.size(); ++i) index_of[all[i].id] = i;
    for (const auto& [site, recs] : cat.sites()) {
        (void)site;
        const auto trig = detect_triggered(recs, cfg);
        for (std::size_t k = 0; k < recs.size(); ++k)
            if (trig[k]) all[index_of[recs[k].id]].quality.triggered = true;
    }
    for (const auto& v : validate_timeline(cat, now)) all[index_of[v.id]].quality.bad_timestamp = true;

    GateResult out;
    std::vector<ImageRecord> passing;
    for (std::size_t i = 0; i < all.size(); ++i) {
        const auto& r = all[i];
        FlagCounts& site = out.report.per_site[r.site_id];
        ++site.total;
        ++out.report.totals.total;
        if (load_error[i]) {
            ++site.load_errors;
            ++out.report.totals.load_errors;
            out.report.load_errors.push_back({r.id, *load_error[i]});
            continue;
        }
        site.add(r.quality);
        out.report.totals.add(r.quality);
        if (r.quality.passes()) {
            ++site.passed;
            ++out.report.totals.passed;
            passing.push_back(r);
        }
    }
    out.passing = Catalog::from_records(std::move(passing), /*check_parents=*/false);
    out.flagged = Catalog::from_records(std::move(all), /*check_parents=*/false);
    return out;
}

inline GateResult apply_quality_gate(const Catalog& cat, const QualityConfig& cfg,
                                     const ImageLoader& loader = load_record_image, int jobs = 1) {
    return apply_quality_gate(cat, cfg, loader,
                              std::chrono::floor<std::chrono::seconds>(std::chrono::system_clock::now()),
                              jobs);
}

}  // namespace streamgate
