#pragma once
/**
 * enhance.hpp
 *
 * Temporal luma-variance reduction. For every frame, the Y planes of its
 * alpha/2 predecessors and alpha/2 successors (same site, quality-passing,
 * within a lookaround cap) are averaged into a mean plane mu, and the frame's
 * luma is mixed as Y' = Y + beta * (Y - mu) with beta in [-1, 0]. Chroma is
 * untouched. Frames are then bottom-center cropped and resized.
 */

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "catalog.hpp"
#include "color.hpp"
#include "image.hpp"
#include "image_io.hpp"
#include "parallel.hpp"
#include "quality.hpp"

namespace streamgate {

struct EnhanceParams {
    int alpha = 2;
    double beta = -0.5;
    int crop_height = 256;
    int crop_width = 256;
    double lookaround_hours = 12.0;

    void validate() const {
        if (alpha < 2 || alpha % 2 != 0) throw ValidationError("enhance: alpha must be even and >= 2");
        if (!(beta >= -1.0 && beta <= 0.0)) throw ValidationError("enhance: beta must lie in [-1, 0]");
        if (crop_height < 1 || crop_width < 1) throw ValidationError("enhance: crop target must be >= 1");
        if (!(lookaround_hours > 0.0)) throw ValidationError("enhance: lookaround must be > 0");
    }
};

inline void to_json(nlohmann::json& j, const EnhanceParams& p) {
    j = nlohmann::json{{"alpha", p.alpha},
                       {"beta", p.beta},
                       {"crop_height", p.crop_height},
                       {"crop_width", p.crop_width},
                       {"lookaround_hours", p.lookaround_hours}};
}

inline void from_json(const nlohmann::json& j, EnhanceParams& p) {
    p.alpha = j.value("alpha", p.alpha);
    p.beta = j.value("beta", p.beta);
    p.crop_height = j.value("crop_height", p.crop_height);
    p.crop_width = j.value("crop_width", p.crop_width);
    p.lookaround_hours = j.value("lookaround_hours", p.lookaround_hours);
}

/// Indices of the temporal neighbours of `index`: up to alpha/2 on each side,
/// nearest first, never the frame itself. Neighbours further than the
/// lookaround cap in time are dropped, so the window shrinks at sequence
/// edges and across long gaps.
inline std::vector<std::size_t> temporal_window(const std::vector<ImageRecord>& site_records,
                                                std::size_t index, int alpha,
                                                double lookaround_hours = 12.0) {
    std::vector<std::size_t> out;
    if (index >= site_records.size() || alpha < 2) return out;
    const auto cap = std::chrono::duration<double, std::ratio<3600>>(lookaround_hours);
    const auto center = site_records[index].captured_at;
    const std::size_t half = static_cast<std::size_t>(alpha / 2);
    for (std::size_t k = 1; k <= std::min(half, index); ++k) {
        const std::size_t j = index - k;
        if (center - site_records[j].captured_at <= cap) out.push_back(j);
    }
    for (std::size_t k = 1; k <= half && index + k < site_records.size(); ++k) {
        const std::size_t j = index + k;
        if (site_records[j].captured_at - center <= cap) out.push_back(j);
    }
    return out;
}

/// Per-pixel arithmetic mean of the luma planes of `window`.
inline Plane mean_luma(std::span<const Image> window) {
    if (window.empty()) throw ValidationError("mean_luma: empty window");
    const int h = window.front().height, w = window.front().width;
    Plane mu(h, w);
    for (const Image& img : window) {
        if (img.height != h || img.width != w) throw ValidationError("mean_luma: dimension mismatch");
        const Image y = luma_of(img);
        for (std::size_t i = 0; i < y.pixels.size(); ++i) mu.samples[i] += y.pixels[i];
    }
    const double n = static_cast<double>(window.size());
    for (double& v : mu.samples) v /= n;
    return mu;
}

/// Y' = Y + beta * (Y - mu), quantized; Cr and Cb are copied through.
inline Image enhance_luma(const Image& ycrcb, const Plane& mean, double beta) {
    if (ycrcb.channels != 3 || ycrcb.colorspace != ColorSpace::YCrCb)
        throw ValidationError("enhance_luma: expected a YCrCb image");
    if (ycrcb.height != mean.height || ycrcb.width != mean.width)
        throw ValidationError("enhance_luma: dimension mismatch");
    if (!(beta >= -1.0 && beta <= 0.0)) throw ValidationError("enhance_luma: beta must lie in [-1, 0]");
    Image out = ycrcb;
    const std::size_t n = ycrcb.pixel_count();
    for (std::size_t i = 0; i < n; ++i) {
        const double y = ycrcb.pixels[3 * i];
        out.pixels[3 * i] = quantize(y + beta * (y - mean.samples[i]));
    }
    return out;
}

/// Square crop of side min(h, w), horizontally centred, touching the bottom.
inline Image bottom_center_crop(const Image& img) {
    const int side = std::min(img.height, img.width);
    const int top = img.height - side;
    const int left = (img.width - side) / 2;
    Image out(side, side, img.channels, img.colorspace);
    const std::size_t row_bytes = static_cast<std::size_t>(side) * img.channels;
    for (int r = 0; r < side; ++r)
        std::copy_n(&img.pixels[img.index(top + r, left)], row_bytes, &out.pixels[out.index(r, 0)]);
    return out;
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
inline Image resize(const Image& img, int target_h, int target_w) {
    if (target_h < 1 || target_w < 1) throw ValidationError("resize: zero target dimension");
    if (img.height < 1 || img.width < 1) throw ValidationError("resize: empty image");
    if (target_h == img.height && target_w == img.width) return img;
    Image out(target_h, target_w, img.channels, img.colorspace);
    const double sy = static_cast<double>(img.height) / target_h;
    const double sx = static_cast<double>(img.width) / target_w;
    for (int r = 0; r < target_h; ++r) {
        const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, double(img.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (int c = 0; c < target_w; ++c) {
            const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, double(img.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;
            for (int k = 0; k < img.channels; ++k) {
                const double top = img.at(y0, x0, k) * (1.0 - wx) + img.at(y0, x1, k) * wx;
                const double bot = img.at(y1, x0, k) * (1.0 - wx) + img.at(y1, x1, k) * wx;
                out.at(r, c, k) = quantize(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    return out;
}

inline Image crop_and_resize(const Image& img, int target_h, int target_w) {
    return resize(bottom_center_crop(img), target_h, target_w);
}

/// Full chain for one frame. An empty neighbour list skips the luma step.
inline Image enhance_frame(const Image& center_ycrcb, std::span<const Image> neighbors_ycrcb,
                           const EnhanceParams& params) {
    Image mixed = center_ycrcb;
    if (!neighbors_ycrcb.empty()) mixed = enhance_luma(center_ycrcb, mean_luma(neighbors_ycrcb), params.beta);
    return crop_and_resize(ycrcb_to_rgb(mixed), params.crop_height, params.crop_width);
}

/// Receives each finished frame and returns the path it was stored under.
using ImageWriter = std::function<std::string(const ImageRecord&, const Image&)>;

inline std::string output_name_for(const std::string& id) {
    std::string name;
    for (char c : id) name += (c == '/' || c == '\\') ? std::string("__") : std::string(1, c);
    std::string lower = name;
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (!lower.ends_with(".png")) name += ".png";
    return name;
}

inline ImageWriter png_writer(const std::filesystem::path& out_dir) {
    return [out_dir](const ImageRecord& r, const Image& img) {
        const auto path = out_dir / r.site_id / output_name_for(r.id);
        write_png(path, img);
        return path.generic_string();
    };
}

struct EnhanceResult {
    Catalog catalog;
    std::vector<IngestError> errors;
};

/// Enhances every record of a gated catalog. Each output depends only on the
/// input frames, so results are identical for any worker count or order.
inline EnhanceResult enhance_catalog(const Catalog& cat, const EnhanceParams& params,
                                     const ImageLoader& loader, const ImageWriter& writer,
                                     int jobs = 1) {
    params.validate();
    constexpr std::size_t kBlock = 64;
    const std::size_t half = static_cast<std::size_t>(params.alpha / 2);

    EnhanceResult result;
    std::vector<ImageRecord> out_records;
    for (const auto& [site, recs] : cat.sites()) {
        (void)site;
        for (std::size_t start = 0; start < recs.size(); start += kBlock) {
            const std::size_t stop = std::min(recs.size(), start + kBlock);
            const std::size_t lo = start >= half ? start - half : 0;
            const std::size_t hi = std::min(recs.size(), stop + half);

            std::vector<std::optional<Image>> ycc(hi - lo);
            std::vector<std::string> load_err(hi - lo);
            parallel_for(hi - lo, jobs, [&](std::size_t k) {
                try {
                    ycc[k] = rgb_to_ycrcb(gray_to_rgb(loader(recs[lo + k])));
                } catch (const std::exception& e) {
                    load_err[k] = e.what();
                }
            });

            std::vector<std::optional<ImageRecord>> done(stop - start);
            std::vector<std::string> errs(stop - start);
            parallel_for(stop - start, jobs, [&](std::size_t k) {
                const std::size_t i = start + k;
                const auto& center = ycc[i - lo];
                if (!center) {
                    errs[k] = load_err[i - lo];
                    return;
                }
                try {
                    std::vector<Image> window;
                    for (std::size_t j : temporal_window(recs, i, params.alpha, params.lookaround_hours)) {
                        const auto& nb = ycc[j - lo];
                        if (nb && nb->height == center->height && nb->width == center->width)
                            window.push_back(*nb);
                    }
                    ImageRecord r = recs[i];
                    r.stage = Stage::Enhanced;
                    r.unenhanced = window.empty();
                    r.path = writer(r, enhance_frame(*center, window, params));
                    done[k] = std::move(r);
                } catch (const std::exception& e) {
                    errs[k] = e.what();
                }
            });
            for (std::size_t k = 0; k < done.size(); ++k) {
                if (done[k]) out_records.push_back(std::move(*done[k]));
                else result.errors.push_back({recs[start + k].id, errs[k]});
            }
        }
    }
    result.catalog = Catalog::from_records(std::move(out_records), /*check_parents=*/false);
    return result;
}

}  // namespace streamgate
