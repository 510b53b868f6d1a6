#include <gtest/gtest.h>

#include <map>
#include <numeric>

#include <streamgate/quality.hpp>

#include "test_util.hpp"

using namespace streamgate;
using testutil::constant_rgb;
using testutil::noise_rgb;

namespace {

Timestamp at(int h, int mi = 0) { return *make_timestamp(2019, 6, 1, h, mi, 0); }
const Timestamp kNow = *make_timestamp(2024, 1, 1, 0, 0, 0);

ImageRecord rec(std::string id, Timestamp t, std::string site = "S") {
    ImageRecord r;
    r.id = id;
    r.path = id + ".png";
    r.site_id = std::move(site);
    r.captured_at = t;
    return r;
}

Image checkerboard(int h, int w) {
    Image img(h, w, 3);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            for (int k = 0; k < 3; ++k) img.at(r, c, k) = ((r + c) % 2) ? 255 : 0;
    return img;
}

Image box_blur5(const Image& img) {
    Image out = img;
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
            for (int k = 0; k < img.channels; ++k) {
                int sum = 0, n = 0;
                for (int dr = -2; dr <= 2; ++dr)
                    for (int dc = -2; dc <= 2; ++dc) {
                        const int rr = r + dr, cc = c + dc;
                        if (rr < 0 || rr >= img.height || cc < 0 || cc >= img.width) continue;
                        sum += img.at(rr, cc, k);
                        ++n;
                    }
                out.at(r, c, k) = quantize(double(sum) / n);
            }
    return out;
}

// Union-find over pixels with luma >= threshold; returns largest component size.
std::size_t largest_bright_component(const Image& img, int threshold) {
    const Image y = luma_of(img);
    const int n = y.height * y.width;
    std::vector<int> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int a) {
        while (parent[a] != a) a = parent[a] = parent[parent[a]];
        return a;
    };
    auto bright = [&](int r, int c) { return y.at(r, c) >= threshold; };
    for (int r = 0; r < y.height; ++r)
        for (int c = 0; c < y.width; ++c) {
            if (!bright(r, c)) continue;
            if (r > 0 && bright(r - 1, c)) parent[find(r * y.width + c)] = find((r - 1) * y.width + c);
            if (c > 0 && bright(r, c - 1)) parent[find(r * y.width + c)] = find(r * y.width + c - 1);
        }
    std::map<int, std::size_t> size;
    for (int r = 0; r < y.height; ++r)
        for (int c = 0; c < y.width; ++c)
            if (bright(r, c)) ++size[find(r * y.width + c)];
    std::size_t best = 0;
    for (const auto& [_, s] : size) best = std::max(best, s);
    return best;
}

struct Fixture {
    std::map<std::string, Image> images;
    std::vector<ImageRecord> records;
    void add(const std::string& id, Timestamp t, Image img, const std::string& site = "S") {
        images[id] = std::move(img);
        records.push_back(rec(id, t, site));
    }
    Catalog catalog() const { return Catalog::from_records(records); }
    ImageLoader loader() const {
        return [this](const ImageRecord& r) { return images.at(r.id); };
    }
};

}  // namespace

TEST(Exposure, WhiteAndBlack) {
    const auto w = exposure_stats(constant_rgb(8, 8, 255, 255, 255));
    EXPECT_DOUBLE_EQ(w.mean_luma, 255.0);
    EXPECT_DOUBLE_EQ(w.frac_bright, 1.0);
    EXPECT_DOUBLE_EQ(w.frac_dark, 0.0);
    const auto b = exposure_stats(constant_rgb(8, 8, 0, 0, 0));
    EXPECT_DOUBLE_EQ(b.mean_luma, 0.0);
    EXPECT_DOUBLE_EQ(b.frac_bright, 0.0);
    EXPECT_DOUBLE_EQ(b.frac_dark, 1.0);
}

TEST(Exposure, CheckerboardMatchesPixelCount) {
    const Image img = checkerboard(10, 12);
    // pixel-count oracle
    double sum = 0, hi = 0, lo = 0;
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c) {
            const int v = img.at(r, c);
            sum += v;
            hi += v >= 250;
            lo += v <= 5;
        }
    const double n = img.pixel_count();
    const auto e = exposure_stats(img);
    EXPECT_DOUBLE_EQ(e.mean_luma, sum / n);
    EXPECT_DOUBLE_EQ(e.frac_bright, hi / n);
    EXPECT_DOUBLE_EQ(e.frac_dark, lo / n);
    EXPECT_DOUBLE_EQ(e.mean_luma, 127.5);
    EXPECT_DOUBLE_EQ(e.frac_bright, 0.5);
    EXPECT_DOUBLE_EQ(e.frac_dark, 0.5);
}

TEST(Exposure, SingleChannelAndEmpty) {
    Image g(4, 4, 1, ColorSpace::RGB, 100);
    EXPECT_DOUBLE_EQ(exposure_stats(g).mean_luma, 100.0);
    EXPECT_THROW(exposure_stats(Image{}), ValidationError);
}

TEST(Grayscale, AchromaticIsGray) {
    Image img(16, 16, 3);
    for (int r = 0; r < 16; ++r)
        for (int c = 0; c < 16; ++c)
            for (int k = 0; k < 3; ++k) img.at(r, c, k) = static_cast<std::uint8_t>(r * 16 + c);
    EXPECT_TRUE(is_grayscale(img));
    EXPECT_TRUE(is_grayscale(Image(4, 4, 1)));
}

TEST(Grayscale, PureRedIsNotGray) {
    const Image red = constant_rgb(8, 8, 255, 0, 0);
    const auto c = chroma_stats(red);
    EXPECT_DOUBLE_EQ(c.std_cr, 0.0);
    EXPECT_DOUBLE_EQ(c.std_cb, 0.0);
    const auto ycc = rgb_to_ycrcb(red);
    EXPECT_EQ(ycc.at(0, 0, 1), 255);
    EXPECT_DOUBLE_EQ(c.mean_offset_cr, 127.0);
    EXPECT_FALSE(is_grayscale(red));
}

TEST(Grayscale, ColorNoiseIsNotGray) {
    const Image img = noise_rgb(32, 32, 7);
    const Image ycc = rgb_to_ycrcb(img);
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < ycc.pixel_count(); ++i) {
        const double v = ycc.pixels[3 * i + 1];
        s += v;
        s2 += v * v;
    }
    const double n = ycc.pixel_count();
    EXPECT_GT(std::sqrt(s2 / n - (s / n) * (s / n)), 20.0);
    EXPECT_FALSE(is_grayscale(img));
}

TEST(Blur, ConstantImageScoresZero) {
    EXPECT_DOUBLE_EQ(blur_score(constant_rgb(10, 10, 30, 60, 90)), 0.0);
}

TEST(Blur, StepEdgeIsSharperThanItsBlur) {
    Image step(20, 20, 3);
    for (int r = 0; r < 20; ++r)
        for (int c = 10; c < 20; ++c)
            for (int k = 0; k < 3; ++k) step.at(r, c, k) = 200;
    EXPECT_GT(blur_score(step), blur_score(box_blur5(step)));
}

TEST(Blur, TooSmallImageIsAnError) {
    EXPECT_THROW(blur_score(constant_rgb(2, 2, 1, 2, 3)), ValidationError);
    EXPECT_NO_THROW(blur_score(constant_rgb(3, 3, 1, 2, 3)));
}

TEST(Blur, BoxBlurNeverRaisesScoreOnSuite) {
    for (unsigned seed = 1; seed <= 30; ++seed) {
        const Image img = noise_rgb(24, 24, seed, 0, static_cast<int>(20 + seed * 7));
        EXPECT_LE(blur_score(box_blur5(img)), blur_score(img)) << seed;
    }
}

TEST(Flare, ExtremesAndSquare) {
    EXPECT_DOUBLE_EQ(flare_score(constant_rgb(10, 10, 0, 0, 0)), 0.0);
    EXPECT_DOUBLE_EQ(flare_score(constant_rgb(10, 10, 255, 255, 255)), 1.0);
    Image img = constant_rgb(100, 100, 40, 40, 40);
    for (int r = 30; r < 40; ++r)
        for (int c = 50; c < 60; ++c)
            for (int k = 0; k < 3; ++k) img.at(r, c, k) = 255;
    const double oracle = double(largest_bright_component(img, 250)) / img.pixel_count();
    EXPECT_DOUBLE_EQ(flare_score(img), oracle);
    EXPECT_DOUBLE_EQ(flare_score(img), 0.01);
}

TEST(Flare, MatchesUnionFindOnRandomBinaryFrames) {
    Rng rng(11);
    for (int t = 0; t < 50; ++t) {
        Image img(20, 30, 3);
        const double p = 0.3 + 0.4 * rng.uniform();
        for (std::size_t i = 0; i < img.pixel_count(); ++i) {
            const std::uint8_t v = rng.uniform() < p ? 255 : 10;
            img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = v;
        }
        EXPECT_DOUBLE_EQ(flare_score(img), double(largest_bright_component(img, 250)) / img.pixel_count());
    }
}

TEST(Triggered, PerfectScheduleHasNoFlags) {
    std::vector<ImageRecord> recs;
    for (int h = 0; h < 24; ++h) recs.push_back(rec("r" + std::to_string(h), at(h)));
    for (bool f : detect_triggered(recs)) EXPECT_FALSE(f);
}

TEST(Triggered, ExtraFrameInSlotIsFlagged) {
    const auto f = detect_triggered({rec("a", at(9, 0)), rec("b", at(9, 23))});
    EXPECT_EQ(f, (std::vector<bool>{false, true}));
}

TEST(Triggered, LateSingleFrameIsFlagged) {
    EXPECT_EQ(detect_triggered({rec("a", at(9, 47))}), std::vector<bool>{true});
    EXPECT_EQ(detect_triggered({rec("a", at(9, 4))}), std::vector<bool>{false});
}

TEST(Triggered, KeeperIsClosestToTopOfHour) {
    const auto f = detect_triggered({rec("a", at(9, 3)), rec("b", at(9, 1)), rec("c", at(10, 2))});
    EXPECT_EQ(f, (std::vector<bool>{true, false, false}));
}

TEST(Gate, IdentityWhenEverythingPasses) {
    Fixture fx;
    for (int h = 0; h < 6; ++h) fx.add("r" + std::to_string(h), at(h), noise_rgb(24, 24, h + 1, 30, 220));
    const Catalog cat = fx.catalog();
    const Catalog before = cat;
    const GateResult g = apply_quality_gate(cat, QualityConfig{}, fx.loader(), kNow);
    EXPECT_EQ(g.passing, cat);
    EXPECT_EQ(cat, before);
    EXPECT_EQ(g.report.totals.passed, 6u);
    for (auto c : g.report.totals.flags) EXPECT_EQ(c, 0u);
}

TEST(Gate, ThreeBlurredOfTen) {
    Fixture fx;
    for (int h = 0; h < 10; ++h) {
        const bool blurry = h == 2 || h == 5 || h == 7;
        fx.add("r" + std::to_string(h), at(h), blurry ? constant_rgb(24, 24, 120, 90, 60) : noise_rgb(24, 24, h + 1, 30, 220));
    }
    const GateResult g = apply_quality_gate(fx.catalog(), QualityConfig{}, fx.loader(), kNow);
    // recount oracle
    std::size_t blurred = 0, clean = 0;
    for (const auto& r : g.flagged.records()) {
        blurred += r.quality.blurred;
        clean += r.quality.passes();
    }
    EXPECT_EQ(g.passing.images_total(), 7u);
    EXPECT_EQ(clean, 7u);
    EXPECT_EQ(g.report.totals.count("blurred"), 3u);
    EXPECT_EQ(g.report.totals.count("blurred"), blurred);
    EXPECT_EQ(g.report.per_site.at("S").count("blurred"), 3u);
}

TEST(Gate, DoubleFailureCountedPerFilterExcludedOnce) {
    Fixture fx;
    fx.add("ok", at(1), noise_rgb(24, 24, 3, 30, 220));
    fx.add("bad", at(2), constant_rgb(24, 24, 128, 128, 128));
    const GateResult g = apply_quality_gate(fx.catalog(), QualityConfig{}, fx.loader(), kNow);
    EXPECT_EQ(g.report.totals.count("grayscale"), 1u);
    EXPECT_EQ(g.report.totals.count("blurred"), 1u);
    EXPECT_EQ(g.report.totals.total, 2u);
    EXPECT_EQ(g.report.totals.passed, 1u);
    ASSERT_EQ(g.passing.images_total(), 1u);
    EXPECT_NE(g.passing.find("ok"), nullptr);
}

TEST(Gate, SequenceFiltersAreIncluded) {
    Fixture fx;
    fx.add("a", at(9), noise_rgb(24, 24, 1, 30, 220));
    fx.add("b", at(9, 30), noise_rgb(24, 24, 2, 30, 220));
    fx.add("old", *make_timestamp(1990, 1, 1, 0, 0, 0), noise_rgb(24, 24, 3, 30, 220), "T");
    const GateResult g = apply_quality_gate(fx.catalog(), QualityConfig{}, fx.loader(), kNow);
    EXPECT_TRUE(g.flagged.find("b")->quality.triggered);
    EXPECT_TRUE(g.flagged.find("old")->quality.bad_timestamp);
    EXPECT_EQ(g.passing.images_total(), 1u);
}

TEST(Gate, LoadErrorsAreCollected) {
    Fixture fx;
    fx.add("a", at(1), noise_rgb(24, 24, 1, 30, 220));
    fx.records.push_back(rec("ghost", at(2)));
    const GateResult g = apply_quality_gate(fx.catalog(), QualityConfig{}, fx.loader(), kNow);
    EXPECT_EQ(g.report.totals.load_errors, 1u);
    ASSERT_EQ(g.report.load_errors.size(), 1u);
    EXPECT_EQ(g.report.load_errors[0].path, "ghost");
    EXPECT_EQ(g.passing.images_total(), 1u);
}

namespace {
Fixture mixed_fixture() {
    Fixture fx;
    for (int h = 0; h < 24; ++h) {
        const int lo = 3 * h, hi = 40 + 9 * h;
        fx.add("m" + std::to_string(h), at(h), noise_rgb(20, 20, 100 + h, lo, std::min(255, hi)));
    }
    return fx;
}
}  // namespace

TEST(Gate, BlurThresholdMonotonicity) {
    const Fixture fx = mixed_fixture();
    std::set<std::string> prev;
    for (double thr : {0.0, 50.0, 200.0, 800.0, 3000.0, 1e5}) {
        QualityConfig cfg;
        cfg.blur_lapvar_min = thr > 0 ? thr : 1e-9;
        const GateResult g = apply_quality_gate(fx.catalog(), cfg, fx.loader(), kNow);
        std::set<std::string> now;
        for (const auto& r : g.flagged.records())
            if (r.quality.blurred) now.insert(r.id);
        EXPECT_TRUE(std::includes(now.begin(), now.end(), prev.begin(), prev.end())) << thr;
        prev = now;
    }
    EXPECT_EQ(prev.size(), 24u);
}

TEST(Gate, OverexposureThresholdMonotonicity) {
    const Fixture fx = mixed_fixture();
    std::set<std::string> prev;
    for (double thr : {250.0, 200.0, 150.0, 100.0, 50.0, 1.0}) {
        QualityConfig cfg;
        cfg.over_mean_luma = thr;
        const GateResult g = apply_quality_gate(fx.catalog(), cfg, fx.loader(), kNow);
        std::set<std::string> now;
        for (const auto& r : g.flagged.records())
            if (r.quality.overexposed) now.insert(r.id);
        EXPECT_TRUE(std::includes(now.begin(), now.end(), prev.begin(), prev.end())) << thr;
        prev = now;
    }
}

TEST(Gate, IsIdempotent) {
    const Fixture fx = mixed_fixture();
    const GateResult once = apply_quality_gate(fx.catalog(), QualityConfig{}, fx.loader(), kNow);
    ASSERT_GT(once.passing.images_total(), 0u);
    const GateResult twice = apply_quality_gate(once.passing, QualityConfig{}, fx.loader(), kNow);
    EXPECT_EQ(twice.passing, once.passing);
}

TEST(Gate, ReportIsDeterministicAcrossWorkers) {
    const Fixture fx = mixed_fixture();
    const auto a = apply_quality_gate(fx.catalog(), QualityConfig{}, fx.loader(), kNow, 1);
    const auto b = apply_quality_gate(fx.catalog(), QualityConfig{}, fx.loader(), kNow, 4);
    EXPECT_EQ(a.report.to_json().dump(), b.report.to_json().dump());
    EXPECT_EQ(a.flagged, b.flagged);
}

TEST(QualityConfig, RejectsBadThresholds) {
    QualityConfig c;
    c.over_clip_frac = 1.5;
    EXPECT_THROW(c.validate(), ValidationError);
    QualityConfig d;
    d.blur_lapvar_min = -1;
    EXPECT_THROW(d.validate(), ValidationError);
}
