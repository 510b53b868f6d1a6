#include <gtest/gtest.h>

#include <map>
#include <mutex>

#include <streamgate/augment.hpp>

#include "test_util.hpp"

using namespace streamgate;
using testutil::constant_rgb;
using testutil::noise_rgb;

namespace {

std::vector<ImageRecord> labelled_records(const std::vector<int>& labels) {
    std::vector<ImageRecord> out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        ImageRecord r;
        char id[32];
        std::snprintf(id, sizeof id, "S/%04zu.png", i);
        r.id = id;
        r.path = id;
        r.site_id = "S";
        r.captured_at = *make_timestamp(2019, 1, 1, 0, 0, 0) + std::chrono::hours(i);
        r.label = labels[i];
        r.stage = Stage::Enhanced;
        out.push_back(r);
    }
    return out;
}

struct MemStore {
    std::map<std::string, Image> out;
    std::mutex mu;
    ImageLoader loader() {
        return [](const ImageRecord& r) { return noise_rgb(12, 12, static_cast<unsigned>(std::hash<std::string>{}(r.id) & 0xffff)); };
    }
    ImageWriter writer() {
        return [this](const ImageRecord& r, const Image& img) {
            std::lock_guard lock(mu);
            out[r.id] = img;
            return "mem:" + r.id;
        };
    }
};

std::map<int, std::int64_t> label_counts(const Catalog& c) {
    std::map<int, std::int64_t> m;
    for (const auto& r : c.records()) ++m[*r.label];
    return m;
}

}  // namespace

TEST(AugmentImage, DimensionsArePreserved) {
    for (int side : {1, 5, 16, 33, 64})
        for (int k = 0; k < 5; ++k) {
            const Image out = augment_image(noise_rgb(side, side, side + k), 7, "r" + std::to_string(k));
            EXPECT_EQ(out.height, side);
            EXPECT_EQ(out.width, side);
            EXPECT_EQ(out.channels, 3);
        }
}

TEST(AugmentImage, ZeroAngleUnitScaleWithFlipIsMirror) {
    const Image img = noise_rgb(20, 20, 3);
    AugmentOverrides o;
    o.angle_deg = 0;
    o.scale = 1.0;
    o.flip = true;
    const Image out = augment_image(img, 1, "x", o);
    EXPECT_EQ(out, hflip(img));
    EXPECT_EQ(hflip(hflip(img)), img);
    o.flip = false;
    EXPECT_EQ(augment_image(img, 1, "x", o), img);
}

TEST(AugmentImage, ConstantStaysConstant) {
    const Image img = constant_rgb(24, 24, 12, 140, 250);
    for (int k = 0; k < 30; ++k) EXPECT_EQ(augment_image(img, k, "id" + std::to_string(k)), img);
}

TEST(AugmentImage, NonSquareIsAnError) {
    EXPECT_THROW(augment_image(noise_rgb(10, 12, 1), 1, "x"), ValidationError);
}

TEST(AugmentImage, DrawsStayOnTheAngleGridAndNeverFlipVertically) {
    std::set<int> angles;
    int flips = 0;
    for (int k = 0; k < 2000; ++k) {
        const auto ops = draw_augment_ops(42, "rec" + std::to_string(k));
        ASSERT_GE(ops.size(), 4u);
        for (const auto& op : ops) EXPECT_TRUE(op.valid());
        EXPECT_EQ(ops[0].kind, AugmentKind::Pad);
        EXPECT_EQ(ops[1].kind, AugmentKind::Rotate);
        EXPECT_EQ(ops[2].kind, AugmentKind::Rescale);
        EXPECT_DOUBLE_EQ(ops[2].scale, 1.3);
        EXPECT_EQ(ops[3].kind, AugmentKind::CenterCrop);
        if (ops.size() == 5) {
            EXPECT_EQ(ops[4].kind, AugmentKind::HFlip);
            ++flips;
        }
        angles.insert(ops[1].angle_deg);
    }
    EXPECT_EQ(angles, std::set<int>(kAugmentAngles.begin(), kAugmentAngles.end()));
    EXPECT_GT(flips, 900);
    EXPECT_LT(flips, 1100);
}

TEST(AugmentImage, VerticalOrderIsKept) {
    // bright sky on top, dark water below; any draw must keep that
    Image img(32, 32, 3);
    for (int r = 0; r < 32; ++r)
        for (int c = 0; c < 32; ++c)
            for (int k = 0; k < 3; ++k) img.at(r, c, k) = r < 16 ? 220 : 30;
    for (int k = 0; k < 50; ++k) {
        const Image out = augment_image(img, 9, "v" + std::to_string(k));
        EXPECT_GT(out.at(2, 16), out.at(29, 16));
    }
}

TEST(AugmentImage, DeterministicPerRecord) {
    const Image img = noise_rgb(16, 16, 4);
    EXPECT_EQ(augment_image(img, 5, "a"), augment_image(img, 5, "a"));
    bool any_diff = false;
    for (int k = 0; k < 10; ++k) any_diff |= augment_image(img, 5, "a") != augment_image(img, 5, "b" + std::to_string(k));
    EXPECT_TRUE(any_diff);
}

TEST(Equalize, SpreadsLumaAndKeepsFlatImages) {
    const Image flat = constant_rgb(8, 8, 90, 90, 90);
    EXPECT_EQ(equalize_luma(flat), flat);
    Image g(16, 16, 1);
    for (int i = 0; i < 256; ++i) g.pixels[i] = static_cast<std::uint8_t>(100 + i % 20);
    const Image eq = equalize_luma(g);
    EXPECT_EQ(*std::max_element(eq.pixels.begin(), eq.pixels.end()), 255);
    EXPECT_EQ(*std::min_element(eq.pixels.begin(), eq.pixels.end()), 0);
}

TEST(BalancePlan, AlreadyBalanced) {
    const auto plan = build_balance_plan({100, 100, 100, 100, 100, 100}, BalanceTarget::fixed(100));
    for (const auto& c : plan.classes) {
        EXPECT_EQ(c.kept, 100);
        EXPECT_EQ(c.generated, 0);
    }
}

TEST(BalancePlan, BinaryCollapseArithmetic) {
    const std::vector<std::int64_t> counts{10, 100};
    const auto plan = build_balance_plan(counts, BalanceTarget::fixed(100));
    // plan arithmetic oracle
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const std::int64_t kept = std::min<std::int64_t>(counts[i], 100);
        EXPECT_EQ(plan.classes[i].kept, kept);
        EXPECT_EQ(plan.classes[i].generated, 100 - kept);
        EXPECT_EQ(plan.classes[i].kept + plan.classes[i].generated, plan.classes[i].target);
    }
    EXPECT_EQ(plan.classes[0], (ClassPlan{10, 10, 90, 100}));
    EXPECT_EQ(plan.classes[1], (ClassPlan{100, 100, 0, 100}));
}

TEST(BalancePlan, MaxClassResolves) {
    const auto plan = build_balance_plan({3, 7}, BalanceTarget::max_class());
    EXPECT_EQ(plan.target_per_label, 7);
    EXPECT_EQ(plan.classes[0].generated, 4);
}

TEST(BalancePlan, AbsentLabelsGetZeroAndExplicitTargetNeedsOriginals) {
    const auto plan = build_balance_plan({5, 0, 2}, BalanceTarget::fixed(4));
    EXPECT_EQ(plan.classes[1].target, 0);
    EXPECT_EQ(plan.classes[0].kept, 4);
    EXPECT_THROW(build_balance_plan({5, 0}, BalanceTarget::explicit_targets({5, 3})), ValidationError);
}

TEST(ApplyBalance, NoOpPlanReturnsInput) {
    const auto recs = labelled_records({1, 1, 2, 2});
    MemStore store;
    const auto plan = build_balance_plan({2, 2}, BalanceTarget::max_class());
    const Catalog out = apply_balance(recs, plan, {}, store.loader(), store.writer());
    EXPECT_EQ(out, Catalog::from_records(recs));
    EXPECT_TRUE(store.out.empty());
}

TEST(ApplyBalance, CountsMatchPlanExactly) {
    std::vector<int> labels(110);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i < 10 ? 1 : 2;
    const auto recs = labelled_records(labels);
    MemStore store;
    const auto plan = build_balance_plan({10, 100}, BalanceTarget::fixed(100));
    BalanceOptions opts;
    opts.seed = 3;
    const Catalog out = apply_balance(recs, plan, opts, store.loader(), store.writer());
    EXPECT_EQ(out.images_total(), 200u);
    const auto counts = label_counts(out);
    EXPECT_EQ(counts.at(1), 100);
    EXPECT_EQ(counts.at(2), 100);
    EXPECT_EQ(store.out.size(), 90u);
}

TEST(ApplyBalance, DownsamplesAndBalancesByTaskClass) {
    const auto recs = labelled_records({1, 2, 3, 4, 4, 5, 5, 6, 6, 6, 6, 6});
    auto binary = [](int l) { return l <= 3 ? 1 : 2; };
    MemStore store;
    const auto plan = build_balance_plan(class_counts(recs, 2, binary), BalanceTarget::fixed(5));
    BalanceOptions opts;
    opts.class_of = binary;
    opts.seed = 11;
    const Catalog out = apply_balance(recs, plan, opts, store.loader(), store.writer());
    std::map<int, int> per_class;
    for (const auto& r : out.records()) ++per_class[binary(*r.label)];
    EXPECT_EQ(per_class[1], 5);
    EXPECT_EQ(per_class[2], 5);
}

TEST(ApplyBalance, AugmentedRecordsCarryParentLabel) {
    const auto recs = labelled_records({1, 2, 2, 2, 2, 3, 3, 3, 3, 3});
    MemStore store;
    const auto plan = build_balance_plan(class_counts(recs, 6, identity_classes()), BalanceTarget::max_class());
    BalanceOptions opts;
    opts.seed = 8;
    const Catalog out = apply_balance(recs, plan, opts, store.loader(), store.writer());
    std::map<std::string, int> label_of;
    for (const auto& r : recs) label_of[r.id] = *r.label;
    for (const auto& r : out.records()) {
        if (r.stage != Stage::Augmented) continue;
        ASSERT_TRUE(r.parent_id.has_value());
        EXPECT_EQ(r.label, label_of.at(*r.parent_id));
        EXPECT_TRUE(r.id.starts_with(*r.parent_id + "#aug"));
        EXPECT_EQ(r.seed, 8u);
    }
    for (const auto& [l, n] : label_counts(out)) EXPECT_EQ(n, 5) << l;
}

TEST(ApplyBalance, ValidationPartitionIsRefused) {
    const auto recs = labelled_records({1, 2});
    MemStore store;
    BalanceOptions opts;
    opts.role = PartitionRole::Validation;
    const auto plan = build_balance_plan({1, 1}, BalanceTarget::max_class());
    EXPECT_THROW(apply_balance(recs, plan, opts, store.loader(), store.writer()), ValidationError);
    EXPECT_THROW(role_from_string("holdout"), ValidationError);
}

TEST(ApplyBalance, DeterministicAcrossRunsAndWorkers) {
    const auto recs = labelled_records({1, 1, 1, 2, 3, 3, 4, 5, 6, 6, 6, 6, 6, 6});
    const auto plan = build_balance_plan(class_counts(recs, 6, identity_classes()), BalanceTarget::max_class());
    MemStore a, b;
    BalanceOptions o1;
    o1.seed = 99;
    BalanceOptions o4 = o1;
    o4.jobs = 4;
    const Catalog ca = apply_balance(recs, plan, o1, a.loader(), a.writer());
    const Catalog cb = apply_balance(recs, plan, o4, b.loader(), b.writer());
    EXPECT_EQ(ca, cb);
    EXPECT_EQ(a.out, b.out);
}

TEST(ApplyBalance, MismatchedPlanIsAnError) {
    const auto recs = labelled_records({1, 2});
    MemStore store;
    const auto plan = build_balance_plan({3, 1}, BalanceTarget::max_class());
    EXPECT_THROW(apply_balance(recs, plan, {}, store.loader(), store.writer()), ValidationError);
}
