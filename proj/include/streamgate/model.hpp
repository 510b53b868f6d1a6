#pragma once
/**
 * model.hpp
 *
 * Desk-scale patch-attention classifier in 64-bit floats.
 *
 *   image -> patches (row-major) -> linear embed + learned position offsets
 *         -> blocks x [x += MHA(LN(x)); x += MLP(LN(x))]
 *         -> mean over tokens -> linear head -> softmax
 *
 * Gradients are derived by hand. All learnable tensors live in one flat
 * buffer described by ParamLayout so the optimizer, serializer and gradient
 * checker can treat them uniformly.
 */

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <zlib.h>

#include "catalog.hpp"
#include "color.hpp"
#include "enhance.hpp"
#include "image.hpp"
#include "parallel.hpp"
#include "quality.hpp"
#include "rng.hpp"

namespace streamgate {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using ConstMatMap = Eigen::Map<const Mat>;
using MatMap = Eigen::Map<Mat>;

struct ModelConfig {
    int input_side = 64;
    int patch_side = 8;
    int embed_dim = 32;
    int heads = 2;
    int blocks = 2;
    int mlp_ratio = 2;
    int classes = 2;
    std::uint64_t seed = 0;
    double learning_rate = 1e-3;
    int epochs = 20;
    int batch_size = 16;

    [[nodiscard]] int grid() const noexcept { return input_side / patch_side; }
    [[nodiscard]] int tokens() const noexcept { return grid() * grid(); }
    [[nodiscard]] int patch_dim() const noexcept { return 3 * patch_side * patch_side; }
    [[nodiscard]] int head_dim() const noexcept { return embed_dim / heads; }
    [[nodiscard]] int hidden() const noexcept { return embed_dim * mlp_ratio; }

    void validate() const {
        if (input_side < 1 || patch_side < 1 || input_side % patch_side != 0)
            throw ValidationError("model: input_side must be a positive multiple of patch_side");
        if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0)
            throw ValidationError("model: embed_dim must be divisible by heads");
        if (blocks < 0 || mlp_ratio < 1) throw ValidationError("model: bad blocks/mlp_ratio");
        if (classes < 2) throw ValidationError("model: classes must be >= 2");
        if (!(learning_rate > 0.0)) throw ValidationError("model: learning_rate must be > 0");
        if (epochs < 0 || batch_size < 1) throw ValidationError("model: bad epochs/batch_size");
    }
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"input_side", c.input_side}, {"patch_side", c.patch_side},
                       {"embed_dim", c.embed_dim},   {"heads", c.heads},
                       {"blocks", c.blocks},         {"mlp_ratio", c.mlp_ratio},
                       {"classes", c.classes},       {"seed", c.seed},
                       {"learning_rate", c.learning_rate}, {"epochs", c.epochs},
                       {"batch_size", c.batch_size}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.input_side = j.value("input_side", c.input_side);
    c.patch_side = j.value("patch_side", c.patch_side);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.heads = j.value("heads", c.heads);
    c.blocks = j.value("blocks", c.blocks);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.classes = j.value("classes", c.classes);
    c.seed = j.value("seed", c.seed);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
}

/// Task class (1-based) of a connectivity label: identity for 6 classes,
/// {1,2,3} -> 1 (disconnected) and {4,5,6} -> 2 (connected) for 2 classes.
inline int task_class(int label, int classes) {
    if (!valid_label(label)) throw ValidationError("label out of range: " + std::to_string(label));
    if (classes == kNumLabels) return label;
    if (classes == 2) return label <= 3 ? 1 : 2;
    throw ValidationError("unsupported class count " + std::to_string(classes));
}

// ---------------------------------------------------------------------------
// Parameter layout

struct TensorSlot {
    std::string name;
    int rows = 0, cols = 0;
    std::size_t offset = 0;
    [[nodiscard]] std::size_t size() const noexcept { return std::size_t(rows) * std::size_t(cols); }
};

class ParamLayout {
public:
    struct Block {
        std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };

    explicit ParamLayout(const ModelConfig& cfg) {
        const int d = cfg.embed_dim, hd = cfg.hidden();
        patch_w = add("patch.weight", cfg.patch_dim(), d);
        patch_b = add("patch.bias", 1, d);
        pos = add("pos", cfg.tokens(), d);
        for (int b = 0; b < cfg.blocks; ++b) {
            const std::string p = "block" + std::to_string(b) + ".";
            Block blk{};
            blk.ln1_g = add(p + "ln1.gain", 1, d);
            blk.ln1_b = add(p + "ln1.bias", 1, d);
            blk.wq = add(p + "attn.wq", d, d);
            blk.bq = add(p + "attn.bq", 1, d);
            blk.wk = add(p + "attn.wk", d, d);
            blk.bk = add(p + "attn.bk", 1, d);
            blk.wv = add(p + "attn.wv", d, d);
            blk.bv = add(p + "attn.bv", 1, d);
            blk.wo = add(p + "attn.wo", d, d);
            blk.bo = add(p + "attn.bo", 1, d);
            blk.ln2_g = add(p + "ln2.gain", 1, d);
            blk.ln2_b = add(p + "ln2.bias", 1, d);
            blk.w1 = add(p + "mlp.w1", d, hd);
            blk.b1 = add(p + "mlp.b1", 1, hd);
            blk.w2 = add(p + "mlp.w2", hd, d);
            blk.b2 = add(p + "mlp.b2", 1, d);
            blocks.push_back(blk);
        }
        head_w = add("head.weight", d, cfg.classes);
        head_b = add("head.bias", 1, cfg.classes);
    }

    [[nodiscard]] const std::vector<TensorSlot>& slots() const noexcept { return slots_; }
    [[nodiscard]] std::size_t total() const noexcept { return total_; }
    [[nodiscard]] const TensorSlot& slot_at(std::size_t offset) const { return slots_[by_offset_.at(offset)]; }

    std::size_t patch_w, patch_b, pos, head_w, head_b;
    std::vector<Block> blocks;

private:
    std::size_t add(std::string name, int rows, int cols) {
        const std::size_t off = total_;
        by_offset_[off] = slots_.size();
        slots_.push_back({std::move(name), rows, cols, off});
        total_ += std::size_t(rows) * std::size_t(cols);
        return off;
    }
    std::vector<TensorSlot> slots_;
    std::map<std::size_t, std::size_t> by_offset_;
    std::size_t total_ = 0;
};

struct ModelState {
    ModelConfig config;
    std::vector<double> params;
    nlohmann::json metadata = nlohmann::json::object();  // training/preprocessing info

    [[nodiscard]] ConstMatMap view(std::size_t offset) const {
        const ParamLayout layout(config);
        const auto& s = layout.slot_at(offset);
        return {params.data() + offset, s.rows, s.cols};
    }
    [[nodiscard]] bool finite() const noexcept {
        return std::all_of(params.begin(), params.end(), [](double v) { return std::isfinite(v); });
    }
};

/// Small symmetric init: Gaussian weights scaled by 1/sqrt(fan_in), a
/// near-zero head so initial predictions sit close to uniform, unit LN gains.
inline ModelState init_model(const ModelConfig& cfg) {
    cfg.validate();
    const ParamLayout layout(cfg);
    ModelState st;
    st.config = cfg;
    st.params.assign(layout.total(), 0.0);
    Rng rng(cfg.seed, "init");
    for (const auto& s : layout.slots()) {
        double scale = 0.0;
        if (s.name.ends_with("gain")) {
            std::fill_n(st.params.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), 1.0);
            continue;
        }
        if (s.rows == 1) continue;  // biases
        if (s.name == "pos" || s.name == "head.weight") scale = 0.02;
        else scale = 1.0 / std::sqrt(static_cast<double>(s.rows));
        for (std::size_t i = 0; i < s.size(); ++i) st.params[s.offset + i] = scale * rng.normal();
    }
    return st;
}

// ---------------------------------------------------------------------------
// Building blocks

/// Tokens (N x 3*p*p) from an input_side square RGB image scaled to [0,1].
/// Patches are taken row-major; inside a patch the layout is (row, col, channel).
inline Mat patchify(const Image& img, const ModelConfig& cfg) {
    if (img.height != cfg.input_side || img.width != cfg.input_side || img.channels != 3 ||
        cfg.input_side % cfg.patch_side != 0)
        throw ValidationError("patchify: expected a " + std::to_string(cfg.input_side) + "x" +
                              std::to_string(cfg.input_side) + "x3 image divisible into patches");
    const int p = cfg.patch_side, g = cfg.grid();
    Mat tokens(g * g, cfg.patch_dim());
    for (int gr = 0; gr < g; ++gr)
        for (int gc = 0; gc < g; ++gc) {
            const int t = gr * g + gc;
            int k = 0;
            for (int r = 0; r < p; ++r)
                for (int c = 0; c < p; ++c)
                    for (int ch = 0; ch < 3; ++ch)
                        tokens(t, k++) = img.at(gr * p + r, gc * p + c, ch) / 255.0;
        }
    return tokens;
}

/// Resizes (if needed) and patchifies one record's pixels.
inline Mat prepare_input(const Image& raw, const ModelConfig& cfg) {
    Image rgb = gray_to_rgb(raw);
    if (rgb.colorspace != ColorSpace::RGB) rgb = ycrcb_to_rgb(rgb);
    if (rgb.height != cfg.input_side || rgb.width != cfg.input_side)
        rgb = resize(rgb, cfg.input_side, cfg.input_side);
    return patchify(rgb, cfg);
}

inline void softmax_rows(Mat& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double mx = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - mx).exp();
        m.row(r) /= m.row(r).sum();
    }
}

inline RowVec softmax(const RowVec& v) {
    Mat m = v;
    softmax_rows(m);
    return m;
}

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
    Mat xhat;
    Eigen::VectorXd inv_std;
};

inline Mat layer_norm(const Mat& x, const ConstMatMap& gain, const ConstMatMap& bias, LayerNormCache& cache) {
    const Eigen::Index n = x.rows(), d = x.cols();
    cache.xhat.resize(n, d);
    cache.inv_std.resize(n);
    Mat y(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.inv_std(r) = inv;
        cache.xhat.row(r) = (x.row(r).array() - mean) * inv;
        y.row(r) = cache.xhat.row(r).array() * gain.row(0).array() + bias.row(0).array();
    }
    return y;
}

inline Mat layer_norm_backward(const Mat& dy, const LayerNormCache& cache, const ConstMatMap& gain,
                               MatMap dgain, MatMap dbias) {
    const Eigen::Index n = dy.rows(), d = dy.cols();
    Mat dx(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
        dgain.row(0).array() += dy.row(r).array() * cache.xhat.row(r).array();
        dbias.row(0) += dy.row(r);
        const RowVec dxhat = (dy.row(r).array() * gain.row(0).array()).matrix();
        const double m1 = dxhat.mean();
        const double m2 = (dxhat.array() * cache.xhat.row(r).array()).mean();
        dx.row(r) = cache.inv_std(r) * (dxhat.array() - m1 - cache.xhat.row(r).array() * m2);
    }
    return dx;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) noexcept {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) noexcept {
    const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

struct AttentionWeights {
    ConstMatMap wq, bq, wk, bk, wv, bv, wo, bo;
    int heads;
};

struct AttentionCache {
    Mat input, q, k, v, concat;
    std::vector<Mat> probs;  // one N x N matrix per head
};

/// Multi-head scaled dot-product self-attention; output has the input's shape.
inline Mat attention(const Mat& x, const AttentionWeights& w, AttentionCache& cache) {
    if (!x.allFinite()) throw std::runtime_error("attention: non-finite input");
    const Eigen::Index n = x.rows(), d = x.cols();
    const int dh = static_cast<int>(d) / w.heads;
    cache.input = x;
    cache.q = (x * w.wq).rowwise() + w.bq.row(0);
    cache.k = (x * w.wk).rowwise() + w.bk.row(0);
    cache.v = (x * w.wv).rowwise() + w.bv.row(0);
    cache.concat.resize(n, d);
    cache.probs.assign(static_cast<std::size_t>(w.heads), Mat());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < w.heads; ++h) {
        Mat s = (cache.q.middleCols(h * dh, dh) * cache.k.middleCols(h * dh, dh).transpose()) * scale;
        softmax_rows(s);
        cache.concat.middleCols(h * dh, dh) = s * cache.v.middleCols(h * dh, dh);
        cache.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    return (cache.concat * w.wo).rowwise() + w.bo.row(0);
}

inline Mat attention(const Mat& x, const AttentionWeights& w) {
    AttentionCache cache;
    return attention(x, w, cache);
}

struct AttentionGrads {
    MatMap wq, bq, wk, bk, wv, bv, wo, bo;
};

inline Mat attention_backward(const Mat& dy, const AttentionWeights& w, const AttentionCache& c,
                              AttentionGrads g) {
    const Eigen::Index d = dy.cols();
    const int dh = static_cast<int>(d) / w.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    g.wo += c.concat.transpose() * dy;
    g.bo.row(0) += dy.colwise().sum();
    const Mat dconcat = dy * w.wo.transpose();
    Mat dq(dy.rows(), d), dk(dy.rows(), d), dv(dy.rows(), d);
    for (int h = 0; h < w.heads; ++h) {
        const Mat& p = c.probs[static_cast<std::size_t>(h)];
        const Mat dout = dconcat.middleCols(h * dh, dh);
        dv.middleCols(h * dh, dh) = p.transpose() * dout;
        const Mat dp = dout * c.v.middleCols(h * dh, dh).transpose();
        Mat ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
        ds *= scale;
        dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh);
    }
    g.wq += c.input.transpose() * dq;
    g.bq.row(0) += dq.colwise().sum();
    g.wk += c.input.transpose() * dk;
    g.bk.row(0) += dk.colwise().sum();
    g.wv += c.input.transpose() * dv;
    g.bv.row(0) += dv.colwise().sum();
    return dq * w.wq.transpose() + dk * w.wk.transpose() + dv * w.wv.transpose();
}

// ---------------------------------------------------------------------------
// Full network

struct Prediction {
    std::string id;
    std::vector<double> logits;
    std::vector<double> probabilities;
    int predicted_label = 0;  // 1-based task class, argmax of the logits
};

struct ForwardCache {
    Mat tokens;
    struct Block {
        LayerNormCache ln1, ln2;
        AttentionCache attn;
        Mat h1;  // pre-activation of the MLP hidden layer
        Mat g;   // GELU(h1)
    };
    std::vector<Block> blocks;
    Mat final_tokens;
    RowVec pooled;
    RowVec logits;
    RowVec probs;
};

class Network {
public:
    explicit Network(const ModelState& st) : st_(st), layout_(st.config) {
        if (st.params.size() != layout_.total()) throw ValidationError("model: parameter count mismatch");
    }

    [[nodiscard]] const ParamLayout& layout() const noexcept { return layout_; }

    [[nodiscard]] AttentionWeights attention_weights(std::size_t b) const {
        const auto& o = layout_.blocks[b];
        return {view(o.wq), view(o.bq), view(o.wk), view(o.bk),
                view(o.wv), view(o.bv), view(o.wo), view(o.bo), st_.config.heads};
    }

    /// Logits for a token matrix; fills `cache` for a later backward pass.
    RowVec forward_tokens(const Mat& tokens, ForwardCache& cache) const {
        const auto& cfg = st_.config;
        cache.tokens = tokens;
        Mat x = (tokens * view(layout_.patch_w)).rowwise() + view(layout_.patch_b).row(0);
        x += view(layout_.pos);
        cache.blocks.resize(layout_.blocks.size());
        for (std::size_t b = 0; b < layout_.blocks.size(); ++b) {
            const auto& o = layout_.blocks[b];
            auto& c = cache.blocks[b];
            const Mat a = layer_norm(x, view(o.ln1_g), view(o.ln1_b), c.ln1);
            x += attention(a, attention_weights(b), c.attn);
            const Mat bn = layer_norm(x, view(o.ln2_g), view(o.ln2_b), c.ln2);
            c.h1 = (bn * view(o.w1)).rowwise() + view(o.b1).row(0);
            c.g = c.h1.unaryExpr([](double v) { return gelu(v); });
            x += (c.g * view(o.w2)).rowwise() + view(o.b2).row(0);
            if (!x.allFinite())
                throw std::runtime_error("forward: non-finite activation after block " + std::to_string(b));
        }
        cache.final_tokens = x;
        cache.pooled = x.colwise().mean();
        cache.logits = cache.pooled * view(layout_.head_w) + view(layout_.head_b);
        if (!cache.logits.allFinite())
            throw std::runtime_error("forward: non-finite logits at layer " + std::to_string(layout_.blocks.size()));
        cache.probs = softmax(cache.logits);
        (void)cfg;
        return cache.logits;
    }

    /// Accumulates parameter gradients for d(loss)/d(logits) into `grad`.
    void backward(const ForwardCache& cache, const RowVec& dlogits, std::vector<double>& grad) const {
        auto g = [&](std::size_t off) {
            const auto& s = layout_.slot_at(off);
            return MatMap(grad.data() + off, s.rows, s.cols);
        };
        const Eigen::Index n = cache.final_tokens.rows();
        g(layout_.head_w) += cache.pooled.transpose() * dlogits;
        g(layout_.head_b) += dlogits;
        const RowVec dpooled = dlogits * view(layout_.head_w).transpose();
        Mat dx = dpooled.replicate(n, 1) / static_cast<double>(n);

        for (std::size_t bi = layout_.blocks.size(); bi-- > 0;) {
            const auto& o = layout_.blocks[bi];
            const auto& c = cache.blocks[bi];
            // MLP branch
            const Mat bn = (c.ln2.xhat.array().rowwise() * view(o.ln2_g).row(0).array()).rowwise() +
                           view(o.ln2_b).row(0).array();
            g(o.w2) += c.g.transpose() * dx;
            g(o.b2).row(0) += dx.colwise().sum();
            const Mat dgel = dx * view(o.w2).transpose();
            const Mat dh1 = dgel.array() * c.h1.unaryExpr([](double v) { return gelu_grad(v); }).array();
            g(o.w1) += bn.transpose() * dh1;
            g(o.b1).row(0) += dh1.colwise().sum();
            const Mat dbn = dh1 * view(o.w1).transpose();
            dx += layer_norm_backward(dbn, c.ln2, view(o.ln2_g), g(o.ln2_g), g(o.ln2_b));
            // attention branch
            AttentionGrads ag{g(o.wq), g(o.bq), g(o.wk), g(o.bk), g(o.wv), g(o.bv), g(o.wo), g(o.bo)};
            const Mat da = attention_backward(dx, attention_weights(bi), c.attn, ag);
            dx += layer_norm_backward(da, c.ln1, view(o.ln1_g), g(o.ln1_g), g(o.ln1_b));
        }
        g(layout_.pos) += dx;
        g(layout_.patch_w) += cache.tokens.transpose() * dx;
        g(layout_.patch_b).row(0) += dx.colwise().sum();
    }

private:
    [[nodiscard]] ConstMatMap view(std::size_t off) const {
        const auto& s = layout_.slot_at(off);
        return {st_.params.data() + off, s.rows, s.cols};
    }

    const ModelState& st_;
    ParamLayout layout_;
};

inline Prediction make_prediction(const RowVec& logits, const RowVec& probs, std::string id = {}) {
    Prediction p;
    p.id = std::move(id);
    p.logits.assign(logits.data(), logits.data() + logits.size());
    p.probabilities.assign(probs.data(), probs.data() + probs.size());
    Eigen::Index arg = 0;
    logits.maxCoeff(&arg);
    p.predicted_label = static_cast<int>(arg) + 1;
    return p;
}

inline Prediction forward_tokens(const Mat& tokens, const ModelState& st) {
    if (!st.finite()) throw std::runtime_error("forward: model state has non-finite parameters");
    ForwardCache cache;
    Network net(st);
    net.forward_tokens(tokens, cache);
    return make_prediction(cache.logits, cache.probs);
}

/// Prediction for one image already cropped to the model's input side
/// (other sizes are resized first).
inline Prediction forward(const Image& img, const ModelState& st) {
    return forward_tokens(prepare_input(img, st.config), st);
}

/// Mean softmax cross-entropy over a batch and its gradient. `labels` are
/// zero-based class indices. Per-sample work may run on `jobs` threads; the
/// per-sample gradients are summed in batch order.
inline double loss_and_gradients(const std::vector<const Mat*>& batch, const std::vector<int>& labels,
                                 const ModelState& st, std::vector<double>& grad, int jobs = 1) {
    if (batch.empty()) throw ValidationError("loss_and_gradients: empty batch");
    if (batch.size() != labels.size()) throw ValidationError("loss_and_gradients: label count mismatch");
    const Network net(st);
    const std::size_t n = batch.size();
    std::vector<std::vector<double>> per(n);
    std::vector<double> losses(n);
    parallel_for(n, jobs, [&](std::size_t i) {
        const int y = labels[i];
        if (y < 0 || y >= st.config.classes) throw ValidationError("loss_and_gradients: label out of range");
        ForwardCache cache;
        net.forward_tokens(*batch[i], cache);
        const RowVec logits = cache.logits;
        const double mx = logits.maxCoeff();
        const double lse = mx + std::log((logits.array() - mx).exp().sum());
        losses[i] = lse - logits(y);
        RowVec d = cache.probs;
        d(y) -= 1.0;
        d /= static_cast<double>(n);
        per[i].assign(net.layout().total(), 0.0);
        net.backward(cache, d, per[i]);
    });
    grad.assign(net.layout().total(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        loss += losses[i];
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += per[i][k];
    }
    loss /= static_cast<double>(n);
    if (!std::isfinite(loss)) throw std::runtime_error("loss_and_gradients: non-finite loss");
    for (double v : grad)
        if (!std::isfinite(v)) throw std::runtime_error("loss_and_gradients: non-finite gradient");
    return loss;
}

// ---------------------------------------------------------------------------
// Training

struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<double> m, v;
    std::int64_t t = 0;

    void step(std::vector<double>& params, const std::vector<double>& grad, double lr) {
        if (m.empty()) m.assign(params.size(), 0.0), v.assign(params.size(), 0.0);
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double test_f1 = 0.0;
    double test_accuracy = 0.0;
};

struct TrainResult {
    ModelState state;
    std::vector<EpochStats> history;
    int best_epoch = -1;  // -1 when no epoch ran
};

struct LabeledInputs {
    std::vector<std::string> ids;
    std::vector<std::string> sites;
    std::vector<Mat> tokens;
    std::vector<int> classes;  // zero-based
};

inline LabeledInputs load_labeled(const std::vector<ImageRecord>& records, const ModelConfig& cfg,
                                  const ImageLoader& loader, int jobs) {
    LabeledInputs out;
    out.tokens.resize(records.size());
    parallel_for(records.size(), jobs, [&](std::size_t i) { out.tokens[i] = prepare_input(loader(records[i]), cfg); });
    for (const auto& r : records) {
        if (!r.label) throw ValidationError("train: unlabeled record '" + r.id + "'");
        out.ids.push_back(r.id);
        out.sites.push_back(r.site_id);
        out.classes.push_back(task_class(*r.label, cfg.classes) - 1);
    }
    return out;
}

// Combined F1 of a confusion matrix (rows truth, cols predicted), as
// m * prod(F1_i) / sum(F1_i). Used for model selection only; the metrics
// module owns the reported numbers.
inline double selection_f1(const std::vector<std::vector<std::int64_t>>& cm) {
    const std::size_t m = cm.size();
    double prod = 1.0, sum = 0.0;
    for (std::size_t a = 0; a < m; ++a) {
        std::int64_t col = 0, row = 0;
        for (std::size_t i = 0; i < m; ++i) col += cm[i][a], row += cm[a][i];
        const double prec = col ? double(cm[a][a]) / double(col) : 0.0;
        const double rec = row ? double(cm[a][a]) / double(row) : 0.0;
        const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
        prod *= f1;
        sum += f1;
    }
    return sum > 0 ? double(m) * prod / sum : 0.0;
}

/// Minibatch Adam. Keeps the state with the best combined test F1 (earliest
/// epoch wins ties). Train and test must not share a site.
inline TrainResult train(const std::vector<ImageRecord>& train_records, const std::vector<ImageRecord>& test_records,
                         const ModelConfig& cfg, const ImageLoader& loader, int jobs = 1) {
    cfg.validate();
    std::set<std::string> train_sites;
    for (const auto& r : train_records) train_sites.insert(r.site_id);
    for (const auto& r : test_records)
        if (train_sites.count(r.site_id))
            throw ValidationError("train: site '" + r.site_id + "' appears in both train and test");

    TrainResult result;
    result.state = init_model(cfg);
    if (cfg.epochs == 0) return result;
    if (train_records.empty()) throw ValidationError("train: empty training partition");

    const LabeledInputs tr = load_labeled(train_records, cfg, loader, jobs);
    const LabeledInputs te = load_labeled(test_records, cfg, loader, jobs);

    ModelState state = result.state;
    Adam opt;
    double best_f1 = -1.0;
    std::vector<double> grad;
    const std::size_t n = tr.tokens.size();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng rng(cfg.seed, "epoch:" + std::to_string(epoch));
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<const Mat*> batch;
            std::vector<int> labels;
            for (std::size_t k = start; k < stop; ++k) {
                batch.push_back(&tr.tokens[order[k]]);
                labels.push_back(tr.classes[order[k]]);
            }
            const double loss = loss_and_gradients(batch, labels, state, grad, jobs);
            if (!std::isfinite(loss)) throw std::runtime_error("train: loss diverged");
            opt.step(state.params, grad, cfg.learning_rate);
            if (!state.finite()) throw std::runtime_error("train: non-finite parameters after step");
            loss_sum += loss;
            ++batches;
        }

        EpochStats es;
        es.epoch = epoch + 1;
        es.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(1, batches));
        if (!te.tokens.empty()) {
            std::vector<std::vector<std::int64_t>> cm(static_cast<std::size_t>(cfg.classes),
                                                      std::vector<std::int64_t>(static_cast<std::size_t>(cfg.classes), 0));
            std::vector<int> pred(te.tokens.size());
            parallel_for(te.tokens.size(), jobs,
                         [&](std::size_t i) { pred[i] = forward_tokens(te.tokens[i], state).predicted_label - 1; });
            std::int64_t correct = 0;
            for (std::size_t i = 0; i < pred.size(); ++i) {
                ++cm[static_cast<std::size_t>(te.classes[i])][static_cast<std::size_t>(pred[i])];
                correct += pred[i] == te.classes[i];
            }
            es.test_f1 = selection_f1(cm);
            es.test_accuracy = static_cast<double>(correct) / static_cast<double>(pred.size());
        }
        result.history.push_back(es);
        const bool better = te.tokens.empty() ? true : es.test_f1 > best_f1;
        if (better) {
            best_f1 = es.test_f1;
            result.state = state;
            result.best_epoch = es.epoch;
        }
    }
    return result;
}

struct PredictResult {
    std::vector<Prediction> predictions;
    std::vector<IngestError> errors;
};

/// One prediction per readable record, in catalog order.
inline PredictResult predict_catalog(const std::vector<ImageRecord>& records, const ModelState& st,
                                     const ImageLoader& loader, int jobs = 1) {
    std::vector<std::optional<Prediction>> out(records.size());
    std::vector<std::string> errs(records.size());
    parallel_for(records.size(), jobs, [&](std::size_t i) {
        try {
            Prediction p = forward(loader(records[i]), st);
            p.id = records[i].id;
            out[i] = std::move(p);
        } catch (const std::exception& e) {
            errs[i] = e.what();
        }
    });
    PredictResult res;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i]) res.predictions.push_back(std::move(*out[i]));
        else res.errors.push_back({records[i].id, errs[i]});
    }
    return res;
}

// ---------------------------------------------------------------------------
// Model file
//
//   "SGVITMDL" | u32 version | u64 config length | config JSON |
//   u32 tensor count | { u16 name length | name | u32 rows | u32 cols | f64[] } |
//   u32 CRC-32 of everything before it
//
// All integers and floats little-endian.

inline constexpr char kModelMagic[8] = {'S', 'G', 'V', 'I', 'T', 'M', 'D', 'L'};
inline constexpr std::uint32_t kModelVersion = 1;

class ModelFileError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

namespace detail {

template <typename T>
void put_le(std::string& buf, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    buf.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(const std::string& buf, std::size_t& pos) {
    if (pos + sizeof(T) > buf.size()) throw ModelFileError("model file: truncated");
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, buf.data() + pos, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos += sizeof(T);
    T v;
    std::memcpy(&v, bytes, sizeof(T));
    return v;
}

}  // namespace detail

inline std::string serialize_model(const ModelState& st) {
    nlohmann::json cfg;
    cfg["model"] = st.config;
    cfg["metadata"] = st.metadata;
    const std::string cfg_text = cfg.dump();

    std::string buf(kModelMagic, sizeof kModelMagic);
    detail::put_le<std::uint32_t>(buf, kModelVersion);
    detail::put_le<std::uint64_t>(buf, cfg_text.size());
    buf += cfg_text;
    const ParamLayout layout(st.config);
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(layout.slots().size()));
    for (const auto& s : layout.slots()) {
        detail::put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(s.name.size()));
        buf += s.name;
        detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(s.rows));
        detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(s.cols));
        for (std::size_t i = 0; i < s.size(); ++i) detail::put_le<double>(buf, st.params[s.offset + i]);
    }
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
    detail::put_le<std::uint32_t>(buf, crc);
    return buf;
}

inline void save_model(const ModelState& st, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::string buf = serialize_model(st);
    std::ofstream out(path, std::ios::binary);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("cannot write model file " + path.string());
}

/// Parses a model file. `expected_classes`, when given, must match the
/// class count the file declares.
inline ModelState deserialize_model(const std::string& buf, std::optional<int> expected_classes = std::nullopt) {
    if (buf.size() < sizeof kModelMagic + 4 || std::memcmp(buf.data(), kModelMagic, sizeof kModelMagic) != 0)
        throw ModelFileError("model file: bad magic");
    if (buf.size() < sizeof kModelMagic + 8) throw ModelFileError("model file: checksum error (truncated)");
    std::size_t tail = buf.size() - 4;
    const auto stored = detail::get_le<std::uint32_t>(buf, tail);
    const auto actual = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
    if (stored != actual) throw ModelFileError("model file: checksum error");

    std::size_t pos = sizeof kModelMagic;
    const auto version = detail::get_le<std::uint32_t>(buf, pos);
    if (version != kModelVersion)
        throw ModelFileError("model file: version " + std::to_string(version) + " is not supported");
    const auto cfg_len = detail::get_le<std::uint64_t>(buf, pos);
    if (pos + cfg_len > buf.size() - 4) throw ModelFileError("model file: bad config block");
    const auto cfg = nlohmann::json::parse(buf.substr(pos, cfg_len));
    pos += cfg_len;

    ModelState st;
    st.config = cfg.at("model").get<ModelConfig>();
    st.metadata = cfg.value("metadata", nlohmann::json::object());
    st.config.validate();
    if (expected_classes && *expected_classes != st.config.classes)
        throw ModelFileError("model file: declares " + std::to_string(st.config.classes) + " classes, expected " +
                             std::to_string(*expected_classes));

    const ParamLayout layout(st.config);
    st.params.assign(layout.total(), 0.0);
    const auto count = detail::get_le<std::uint32_t>(buf, pos);
    if (count != layout.slots().size()) throw ModelFileError("model file: tensor count does not match config");
    for (const auto& s : layout.slots()) {
        const auto name_len = detail::get_le<std::uint16_t>(buf, pos);
        if (pos + name_len > buf.size()) throw ModelFileError("model file: truncated");
        const std::string name = buf.substr(pos, name_len);
        pos += name_len;
        const auto rows = detail::get_le<std::uint32_t>(buf, pos);
        const auto cols = detail::get_le<std::uint32_t>(buf, pos);
        if (name != s.name || rows != static_cast<std::uint32_t>(s.rows) || cols != static_cast<std::uint32_t>(s.cols))
            throw ModelFileError("model file: tensor '" + name + "' does not match config");
        for (std::size_t i = 0; i < s.size(); ++i) st.params[s.offset + i] = detail::get_le<double>(buf, pos);
    }
    if (pos != buf.size() - 4) throw ModelFileError("model file: trailing bytes");
    return st;
}

inline ModelState load_model(const std::filesystem::path& path, std::optional<int> expected_classes = std::nullopt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("missing model file " + path.string());
    const std::string buf{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return deserialize_model(buf, expected_classes);
}

}  // namespace streamgate
