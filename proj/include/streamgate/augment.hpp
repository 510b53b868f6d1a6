#pragma once
/**
 * augment.hpp
 *
 * Hand-crafted geometric augmentation and class balancing.
 *
 * One augmented frame = reflection pad -> rotate by a signed multiple of 5
 * degrees (|angle| <= 30) -> rescale 1.3x -> centre crop back to the input
 * side -> horizontal flip with probability 1/2. Rotation, rescale and crop
 * are composed into a single inverse mapping so each output pixel is
 * resampled once. All draws come from a stream keyed by (seed, record id).
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "catalog.hpp"
#include "color.hpp"
#include "enhance.hpp"
#include "image.hpp"
#include "parallel.hpp"
#include "quality.hpp"
#include "rng.hpp"

namespace streamgate {

inline constexpr double kAugmentPadFraction = 0.15;
inline constexpr double kAugmentScale = 1.3;
inline constexpr std::array<int, 12> kAugmentAngles = {-30, -25, -20, -15, -10, -5, 5, 10, 15, 20, 25, 30};

/// Geometric operations available to the augmenter. There is deliberately no
/// vertical flip: an upside-down river is not a plausible camera view.
enum class AugmentKind { Pad, Rotate, Rescale, CenterCrop, HFlip };

struct AugmentOp {
    AugmentKind kind = AugmentKind::Pad;
    int angle_deg = 0;   // Rotate only
    double scale = 1.0;  // Rescale only

    [[nodiscard]] bool valid() const noexcept {
        if (kind == AugmentKind::Rotate)
            return angle_deg % 5 == 0 && std::abs(angle_deg) >= 5 && std::abs(angle_deg) <= 30;
        if (kind == AugmentKind::Rescale) return scale > 0.0;
        return true;
    }
};

/// Test hooks that pin individual draws.
struct AugmentOverrides {
    std::optional<int> angle_deg;
    std::optional<double> scale;
    std::optional<bool> flip;
};

/// The operation list drawn for one record.
inline std::vector<AugmentOp> draw_augment_ops(std::uint64_t seed, std::string_view record_id) {
    Rng rng(seed, record_id);
    const int angle = kAugmentAngles[rng.below(kAugmentAngles.size())];
    const bool flip = rng.coin();
    std::vector<AugmentOp> ops = {{AugmentKind::Pad},
                                  {AugmentKind::Rotate, angle},
                                  {AugmentKind::Rescale, 0, kAugmentScale},
                                  {AugmentKind::CenterCrop}};
    if (flip) ops.push_back({AugmentKind::HFlip});
    return ops;
}

namespace detail {

// Reflect-101 index into [0, n).
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

inline Image reflect_pad(const Image& img, int pad) {
    Image out(img.height + 2 * pad, img.width + 2 * pad, img.channels, img.colorspace);
    for (int r = 0; r < out.height; ++r) {
        const int sr = reflect_index(r - pad, img.height);
        for (int c = 0; c < out.width; ++c) {
            const int sc = reflect_index(c - pad, img.width);
            for (int k = 0; k < img.channels; ++k) out.at(r, c, k) = img.at(sr, sc, k);
        }
    }
    return out;
}

}  // namespace detail

/// Global histogram equalization of the luma plane; chroma is preserved.
inline Image equalize_luma(const Image& img) {
    const bool gray = img.channels == 1;
    Image ycc = gray ? img : rgb_to_ycrcb(img);
    const std::size_t n = ycc.pixel_count();
    const int stride = ycc.channels;
    std::array<std::size_t, 256> hist{};
    for (std::size_t i = 0; i < n; ++i) ++hist[ycc.pixels[i * stride]];
    std::array<std::size_t, 256> cdf{};
    std::size_t run = 0;
    for (int v = 0; v < 256; ++v) cdf[v] = run += hist[v];
    std::size_t cdf_min = 0;
    for (int v = 0; v < 256; ++v)
        if (hist[v]) { cdf_min = cdf[v]; break; }
    if (n == cdf_min) return img;  // single gray level
    std::array<std::uint8_t, 256> lut{};
    for (int v = 0; v < 256; ++v)
        lut[v] = quantize(255.0 * static_cast<double>(cdf[v] - std::min(cdf[v], cdf_min)) /
                          static_cast<double>(n - cdf_min));
    for (std::size_t i = 0; i < n; ++i) ycc.pixels[i * stride] = lut[ycc.pixels[i * stride]];
    return gray ? ycc : ycrcb_to_rgb(ycc);
}

/// One augmented copy of a square frame. Deterministic in (seed, record_id).
inline Image augment_image(const Image& img, std::uint64_t seed, std::string_view record_id,
                           const AugmentOverrides& overrides = {}, bool equalize = false) {
    if (img.height != img.width || img.height < 1) throw ValidationError("augment_image: input must be square");
    const auto ops = draw_augment_ops(seed, record_id);
    int angle = ops[1].angle_deg;
    double scale = ops[2].scale;
    bool flip = ops.size() > 4;
    if (overrides.angle_deg) angle = *overrides.angle_deg;
    if (overrides.scale) scale = *overrides.scale;
    if (overrides.flip) flip = *overrides.flip;

    const int side = img.height;
    const int pad = static_cast<int>(std::ceil(kAugmentPadFraction * side));
    const Image padded = detail::reflect_pad(img, pad);
    const double half_out = side / 2.0;
    const double half_pad = padded.height / 2.0;
    const double theta = angle * 3.14159265358979323846 / 180.0;
    const double cs = std::cos(theta), sn = std::sin(theta);

    Image out(side, side, img.channels, img.colorspace);
    for (int r = 0; r < side; ++r) {
        for (int c = 0; c < side; ++c) {
            // Output -> unscaled -> unrotated offsets from the centre.
            const double dx = (c + 0.5 - half_out) / scale;
            const double dy = (r + 0.5 - half_out) / scale;
            const double sx = cs * dx + sn * dy;
            const double sy = -sn * dx + cs * dy;
            const double fx = std::clamp(sx + half_pad - 0.5, 0.0, double(padded.width - 1));
            const double fy = std::clamp(sy + half_pad - 0.5, 0.0, double(padded.height - 1));
            const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
            const int x1 = std::min(x0 + 1, padded.width - 1), y1 = std::min(y0 + 1, padded.height - 1);
            const double wx = fx - x0, wy = fy - y0;
            for (int k = 0; k < img.channels; ++k) {
                const double top = padded.at(y0, x0, k) * (1.0 - wx) + padded.at(y0, x1, k) * wx;
                const double bot = padded.at(y1, x0, k) * (1.0 - wx) + padded.at(y1, x1, k) * wx;
                out.at(r, c, k) = quantize(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    if (flip) out = hflip(out);
    if (equalize) out = equalize_luma(out);
    return out;
}

// ---------------------------------------------------------------------------
// Balancing

struct BalanceTarget {
    enum class Mode { Count, MaxClass, PerClass } mode = Mode::MaxClass;
    std::int64_t count = 0;
    std::vector<std::int64_t> per_class;

    static BalanceTarget max_class() { return {}; }
    static BalanceTarget fixed(std::int64_t n) { return {Mode::Count, n, {}}; }
    static BalanceTarget explicit_targets(std::vector<std::int64_t> t) { return {Mode::PerClass, 0, std::move(t)}; }
};

struct ClassPlan {
    std::int64_t originals = 0;
    std::int64_t kept = 0;
    std::int64_t generated = 0;
    std::int64_t target = 0;
    friend bool operator==(const ClassPlan&, const ClassPlan&) = default;
};

/// Per-class plan; index 0 is class 1.
struct BalancePlan {
    std::vector<ClassPlan> classes;
    std::int64_t target_per_label = 0;
};

/// `counts[i]` is the number of originals of class i+1. Classes with no
/// originals get target 0 unless an explicit per-class target says otherwise,
/// which is an error.
inline BalancePlan build_balance_plan(const std::vector<std::int64_t>& counts, const BalanceTarget& target) {
    BalancePlan plan;
    std::int64_t resolved = 0;
    switch (target.mode) {
    case BalanceTarget::Mode::MaxClass:
        resolved = counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end());
        break;
    case BalanceTarget::Mode::Count:
        if (target.count < 0) throw ValidationError("balance: negative target");
        resolved = target.count;
        break;
    case BalanceTarget::Mode::PerClass:
        if (target.per_class.size() != counts.size())
            throw ValidationError("balance: per-class target size mismatch");
        break;
    }
    plan.target_per_label = resolved;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        ClassPlan cp;
        cp.originals = counts[i];
        cp.target = target.mode == BalanceTarget::Mode::PerClass ? target.per_class[i]
                    : counts[i] == 0                             ? 0
                                                                 : resolved;
        if (cp.target < 0) throw ValidationError("balance: negative target");
        if (cp.target > 0 && cp.originals == 0)
            throw ValidationError("balance: class " + std::to_string(i + 1) +
                                  " has a target but no original images");
        cp.kept = std::min(cp.originals, cp.target);
        cp.generated = cp.target - cp.kept;
        plan.classes.push_back(cp);
    }
    return plan;
}

enum class PartitionRole { Train, Test, Validation };

inline PartitionRole role_from_string(std::string_view s) {
    if (s == "train") return PartitionRole::Train;
    if (s == "test") return PartitionRole::Test;
    if (s == "val" || s == "validation") return PartitionRole::Validation;
    throw ValidationError("unknown partition '" + std::string(s) + "'");
}

/// Maps a 1..6 label to a task class 1..m.
using ClassMap = std::function<int(int)>;

inline ClassMap identity_classes() { return [](int l) { return l; }; }

struct AugmentJob {
    ImageRecord parent;
    ImageRecord output;
};

struct BalanceSelection {
    std::vector<ImageRecord> kept;
    std::vector<AugmentJob> generated;
};

inline std::vector<std::int64_t> class_counts(const std::vector<ImageRecord>& records, int classes,
                                              const ClassMap& class_of) {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(classes), 0);
    for (const auto& r : records) {
        if (!r.label) throw ValidationError("balance: unlabeled record '" + r.id + "'");
        const int c = class_of(*r.label);
        if (c < 1 || c > classes) throw ValidationError("balance: class out of range for '" + r.id + "'");
        ++counts[static_cast<std::size_t>(c - 1)];
    }
    return counts;
}

/// Decides which originals survive and which copies to make, without
/// touching pixels.
inline BalanceSelection select_for_balance(const std::vector<ImageRecord>& records, const BalancePlan& plan,
                                           std::uint64_t seed, PartitionRole role,
                                           const ClassMap& class_of = identity_classes()) {
    if (role == PartitionRole::Validation)
        throw ValidationError("balance: validation data is never augmented");
    const int classes = static_cast<int>(plan.classes.size());
    const auto counts = class_counts(records, classes, class_of);
    std::vector<std::vector<ImageRecord>> by_class(plan.classes.size());
    for (const auto& r : records) by_class[static_cast<std::size_t>(class_of(*r.label) - 1)].push_back(r);

    BalanceSelection sel;
    for (std::size_t ci = 0; ci < by_class.size(); ++ci) {
        auto& originals = by_class[ci];
        const ClassPlan& cp = plan.classes[ci];
        if (counts[ci] != cp.originals)
            throw ValidationError("balance: plan was built for a different partition");
        std::sort(originals.begin(), originals.end(),
                  [](const ImageRecord& a, const ImageRecord& b) { return a.id < b.id; });
        if (cp.generated == 0) {
            // Uniform sample of `target` originals.
            Rng rng(seed, "keep:" + std::to_string(ci + 1));
            for (std::size_t i = 0; i < static_cast<std::size_t>(cp.kept); ++i) {
                const std::size_t j = i + static_cast<std::size_t>(rng.below(originals.size() - i));
                std::swap(originals[i], originals[j]);
            }
            originals.resize(static_cast<std::size_t>(cp.kept));
            std::sort(originals.begin(), originals.end(),
                      [](const ImageRecord& a, const ImageRecord& b) { return a.id < b.id; });
            sel.kept.insert(sel.kept.end(), originals.begin(), originals.end());
            continue;
        }
        sel.kept.insert(sel.kept.end(), originals.begin(), originals.end());
        const std::size_t n = originals.size();
        for (std::int64_t k = 0; k < cp.generated; ++k) {
            const auto& parent = originals[static_cast<std::size_t>(k) % n];
            ImageRecord out = parent;
            out.id = parent.id + "#aug" + std::to_string(static_cast<std::size_t>(k) / n);
            out.stage = Stage::Augmented;
            out.parent_id = parent.id;
            out.seed = seed;
            out.unenhanced = false;
            sel.generated.push_back({parent, std::move(out)});
        }
    }
    return sel;
}

/// Produces one synthetic frame from a parent. The default is augment_image;
/// an external generator can be plugged in here.
using FrameGenerator = std::function<Image(const Image& parent, std::string_view output_id, std::uint64_t seed)>;

struct BalanceOptions {
    std::uint64_t seed = 0;
    PartitionRole role = PartitionRole::Train;
    ClassMap class_of = identity_classes();
    bool equalize = false;
    int jobs = 1;
    FrameGenerator generator;  // empty -> augment_image
};

/// Balanced partition: kept originals plus generated copies, whose per-class
/// counts equal the plan targets exactly.
inline Catalog apply_balance(const std::vector<ImageRecord>& records, const BalancePlan& plan,
                             const BalanceOptions& opts, const ImageLoader& loader, const ImageWriter& writer) {
    BalanceSelection sel = select_for_balance(records, plan, opts.seed, opts.role, opts.class_of);
    const bool equalize = opts.equalize;
    const FrameGenerator gen = opts.generator ? opts.generator
                                              : FrameGenerator([equalize](const Image& p, std::string_view id,
                                                                          std::uint64_t seed) {
                                                    return augment_image(p, seed, id, {}, equalize);
                                                });
    parallel_for(sel.generated.size(), opts.jobs, [&](std::size_t i) {
        auto& job = sel.generated[i];
        const Image parent = gray_to_rgb(loader(job.parent));
        job.output.path = writer(job.output, gen(parent, job.output.id, opts.seed));
    });
    std::vector<ImageRecord> out = std::move(sel.kept);
    for (auto& job : sel.generated) out.push_back(std::move(job.output));
    return Catalog::from_records(std::move(out));
}

}  // namespace streamgate
