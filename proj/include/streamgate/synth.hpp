#pragma once
/**
 * synth.hpp
 *
 * Synthetic river-camera corpus. Each site has its own textured, colourful
 * backdrop; a water band in the lower half of the frame carries the
 * connectivity label through its brightness. Labels change in runs over an
 * hourly capture schedule, foliage flickers from frame to frame, and a few
 * frames per site are replaced by known defects.
 *
 * Files are written as <root>/<SITE>/<SITE>_YYYYMMDD-HHMMSS.png plus a
 * <root>/labels.csv keyed by relative path.
 */

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "catalog.hpp"
#include "image.hpp"
#include "image_io.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace streamgate {

enum class Defect { None, Black, White, Achromatic, Blurred, Blob, OffSchedule };

inline std::string_view to_string(Defect d) {
    switch (d) {
        case Defect::None: return "none";
        case Defect::Black: return "black";
        case Defect::White: return "white";
        case Defect::Achromatic: return "achromatic";
        case Defect::Blurred: return "blurred";
        case Defect::Blob: return "blob";
        case Defect::OffSchedule: return "off_schedule";
    }
    return "none";
}

/// Quality flag that is expected to catch each defect.
inline std::string_view intended_flag(Defect d) {
    switch (d) {
        case Defect::Black: return "underexposed";
        case Defect::White: return "overexposed";
        case Defect::Achromatic: return "grayscale";
        case Defect::Blurred: return "blurred";
        case Defect::Blob: return "flared";
        case Defect::OffSchedule: return "triggered";
        case Defect::None: break;
    }
    return "";
}

inline constexpr std::array<Defect, 6> kAllDefects = {Defect::Black,   Defect::White, Defect::Achromatic,
                                                      Defect::Blurred, Defect::Blob,  Defect::OffSchedule};

struct SynthConfig {
    int sites = 6;
    int frames_per_site = 100;
    int height = 96;
    int width = 128;
    std::uint64_t seed = 0;
    int defects_per_kind = 1;  // per site
    int year = 2019, month = 6, day = 1;
};

struct SynthFrame {
    std::string id;  // relative path, as ingest will name it
    std::string site;
    Timestamp time;
    int label = 1;
    Defect defect = Defect::None;
    int site_index = 0, frame_index = 0;
};

/// Mean water-band luma per label; 1-3 dark (disconnected), 4-6 bright.
inline constexpr std::array<double, kNumLabels> kBandLuma = {40, 60, 80, 150, 172, 195};

inline std::string synth_site_name(int s) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "SITE%02d", s + 1);
    return buf;
}

inline std::string synth_filename(const std::string& site, Timestamp t) {
    const auto day = std::chrono::floor<std::chrono::days>(t);
    const std::chrono::year_month_day ymd{day};
    const std::chrono::hh_mm_ss hms{t - day};
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%04d%02d%02d-%02d%02d%02d.png", site.c_str(), int(ymd.year()),
                  unsigned(ymd.month()), unsigned(ymd.day()), int(hms.hours().count()),
                  int(hms.minutes().count()), int(hms.seconds().count()));
    return buf;
}

/// Schedule and labels for every frame, without pixels.
inline std::vector<SynthFrame> plan_corpus(const SynthConfig& cfg) {
    if (cfg.sites < 1 || cfg.frames_per_site < 1 || cfg.height < 16 || cfg.width < 16)
        throw ValidationError("synth: bad corpus dimensions");
    const Timestamp base = *make_timestamp(cfg.year, cfg.month, cfg.day, 0, 0, 0);
    std::vector<SynthFrame> frames;
    for (int s = 0; s < cfg.sites; ++s) {
        const std::string site = synth_site_name(s);
        Rng rng(cfg.seed, "synth-plan:" + site);

        // runs alternate between the disconnected and connected groups
        std::vector<int> labels;
        bool wet = rng.coin();
        while (static_cast<int>(labels.size()) < cfg.frames_per_site) {
            const int len = 6 + static_cast<int>(rng.below(12));
            const int label = (wet ? 4 : 1) + static_cast<int>(rng.below(3));
            labels.insert(labels.end(), static_cast<std::size_t>(len), label);
            wet = !wet;
        }

        std::vector<Defect> defect(static_cast<std::size_t>(cfg.frames_per_site), Defect::None);
        const int total_defects = static_cast<int>(kAllDefects.size()) * cfg.defects_per_kind;
        if (total_defects > 0) {
            if (total_defects * 3 > cfg.frames_per_site) throw ValidationError("synth: too many defects per site");
            const int stride = cfg.frames_per_site / total_defects;
            for (int d = 0; d < total_defects; ++d) {
                const int k = d * stride + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, stride - 2))));
                defect[static_cast<std::size_t>(k)] = kAllDefects[static_cast<std::size_t>(d) % kAllDefects.size()];
            }
        }

        for (int k = 0; k < cfg.frames_per_site; ++k) {
            SynthFrame f;
            f.site = site;
            f.site_index = s;
            f.frame_index = k;
            f.label = labels[static_cast<std::size_t>(k)];
            f.defect = defect[static_cast<std::size_t>(k)];
            auto t = base + std::chrono::hours(k) + std::chrono::seconds(rng.below(45));
            if (f.defect == Defect::OffSchedule) t = base + std::chrono::hours(k) + std::chrono::minutes(20 + rng.below(20));
            f.time = std::chrono::time_point_cast<std::chrono::seconds>(t);
            f.id = site + "/" + synth_filename(site, f.time);
            frames.push_back(std::move(f));
        }
    }
    return frames;
}

namespace detail {

inline Image gaussian_blur(const Image& img, double sigma) {
    const int radius = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) sum += k[std::size_t(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& v : k) v /= sum;
    std::vector<double> tmp(img.pixels.size());
    const int h = img.height, w = img.width, c = img.channels;
    for (int r = 0; r < h; ++r)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[std::size_t(i + radius)] * img.at(r, std::clamp(x + i, 0, w - 1), ch);
                tmp[(std::size_t(r) * w + x) * c + ch] = acc;
            }
    Image out = img;
    for (int r = 0; r < h; ++r)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[std::size_t(i + radius)] * tmp[(std::size_t(std::clamp(r + i, 0, h - 1)) * w + x) * c + ch];
                out.at(r, x, ch) = quantize(acc);
            }
    return out;
}

}  // namespace detail

/// Pixels of one planned frame.
inline Image render_frame(const SynthFrame& f, const SynthConfig& cfg) {
    const int h = cfg.height, w = cfg.width;
    Rng site_rng(cfg.seed, "synth-site:" + f.site);
    // per-site backdrop: foliage colour, texture frequencies, band geometry
    const double fr = 50 + 40 * site_rng.uniform(), fg = 85 + 45 * site_rng.uniform(), fb = 35 + 35 * site_rng.uniform();
    const double kx1 = 0.08 + 0.25 * site_rng.uniform(), ky1 = 0.05 + 0.2 * site_rng.uniform();
    const double kx2 = 0.15 + 0.3 * site_rng.uniform(), ky2 = 0.1 + 0.3 * site_rng.uniform();
    const double ph1 = 6.283 * site_rng.uniform(), ph2 = 6.283 * site_rng.uniform();
    const double sky_rows = (0.12 + 0.12 * site_rng.uniform()) * h;
    const double band_top = (0.58 + 0.06 * site_rng.uniform()) * h;
    const double band_bottom = (0.86 + 0.06 * site_rng.uniform()) * h;
    const double wave_amp = 2 + 3 * site_rng.uniform(), wave_k = 0.03 + 0.05 * site_rng.uniform();

    Rng rng(cfg.seed, "synth-frame:" + f.id);
    const double flicker = 0.82 + 0.36 * rng.uniform();
    const double band_y = kBandLuma[static_cast<std::size_t>(f.label - 1)] + 6 * (rng.uniform() - 0.5);

    Image img(h, w, 3, ColorSpace::RGB);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            std::array<double, 3> px{};
            const double edge = wave_amp * std::sin(wave_k * c + ph1);
            if (r < sky_rows) {
                const double t = r / std::max(1.0, sky_rows);
                px = {150 + 25 * t, 175 + 15 * t, 215 - 10 * t};
            } else if (r >= band_top + edge && r < band_bottom - edge) {
                px = {band_y - 14, band_y, band_y + 22};
            } else {
                const double tex = 22 * std::sin(kx1 * c + ky1 * r + ph1) + 16 * std::sin(kx2 * c - ky2 * r + ph2);
                const double g = r < band_top ? flicker : 1.0;
                px = {(fr + tex) * g, (fg + tex) * g, (fb + 0.5 * tex) * g};
            }
            for (int ch = 0; ch < 3; ++ch)
                img.at(r, c, ch) = static_cast<std::uint8_t>(std::clamp(px[std::size_t(ch)] + 9.0 * rng.normal(), 10.0, 240.0) + 0.5);
        }

    switch (f.defect) {
        case Defect::None:
        case Defect::OffSchedule: break;
        case Defect::Black: std::fill(img.pixels.begin(), img.pixels.end(), std::uint8_t{0}); break;
        case Defect::White: std::fill(img.pixels.begin(), img.pixels.end(), std::uint8_t{255}); break;
        case Defect::Achromatic:
            for (std::size_t i = 0; i < img.pixel_count(); ++i) {
                const double y = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] + 0.114 * img.pixels[3 * i + 2];
                img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = quantize(y);
            }
            break;
        case Defect::Blurred: img = detail::gaussian_blur(img, 3.0); break;
        case Defect::Blob: {
            // saturated disc grown until it covers half the frame
            const double cy = h * (0.25 + 0.2 * rng.uniform()), cx = w * (0.3 + 0.4 * rng.uniform());
            std::vector<double> dist;
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < w; ++c) dist.push_back(std::hypot(r - cy, c - cx));
            std::vector<double> sorted = dist;
            const std::size_t half = sorted.size() / 2;
            std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(half), sorted.end());
            const double radius = sorted[half];
            for (std::size_t i = 0; i < dist.size(); ++i)
                if (dist[i] <= radius) img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = 255;
            break;
        }
    }
    return img;
}

struct SynthCorpus {
    std::vector<SynthFrame> frames;
};

/// Writes the corpus under `root` (created if missing) and returns its plan.
inline SynthCorpus generate_corpus(const std::filesystem::path& root, const SynthConfig& cfg, int jobs = 1) {
    SynthCorpus corpus{plan_corpus(cfg)};
    std::filesystem::create_directories(root);
    parallel_for(corpus.frames.size(), jobs, [&](std::size_t i) {
        const auto& f = corpus.frames[i];
        write_png(root / f.id, render_frame(f, cfg));
    });
    std::ofstream labels(root / "labels.csv", std::ios::binary);
    labels << "id,label\n";
    for (const auto& f : corpus.frames) labels << f.id << ',' << f.label << '\n';
    std::ofstream truth(root / "defects.csv", std::ios::binary);
    truth << "id,defect\n";
    for (const auto& f : corpus.frames)
        if (f.defect != Defect::None) truth << f.id << ',' << to_string(f.defect) << '\n';
    if (!labels || !truth) throw std::runtime_error("synth: cannot write corpus files");
    return corpus;
}

}  // namespace streamgate
