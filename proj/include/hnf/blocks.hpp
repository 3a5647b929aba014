#pragma once

#include "hnf/ops.hpp"
#include "hnf/params.hpp"

namespace hnf {

namespace init {

// He initialization for conv weights [Cout,Cin,kd,kh,kw].
template <typename T>
Tensor<T> conv_weight(int64_t cout, int64_t cin, std::array<int64_t, 3> k, Rng& rng) {
    Tensor<T> w = Tensor<T>::zeros({cout, cin, k[0], k[1], k[2]}, true);
    const double fan_in = static_cast<double>(cin * k[0] * k[1] * k[2]);
    fill_normal(w, rng, 0.0, std::sqrt(2.0 / fan_in));
    return w;
}

template <typename T>
Tensor<T> zeros_vec(int64_t n, bool requires_grad = true) {
    return Tensor<T>::zeros({n}, requires_grad);
}

template <typename T>
Tensor<T> ones_vec(int64_t n) {
    return Tensor<T>::full({n}, T(1), true);
}

}  // namespace init

// ---------------------------------------------------------------------------
// ConvBlock: two (conv3x3x3 -> instance norm -> ReLU) stages. Spatial extent
// is preserved (pad 1, stride 1). Convs carry no bias; the norm's shift makes
// a conv bias a dead parameter.
// ---------------------------------------------------------------------------

template <typename T>
class ConvBlock {
public:
    ConvBlock(int64_t in_channels, int64_t out_channels, Rng& rng)
        : in_channels_(in_channels),
          out_channels_(out_channels),
          w1_(init::conv_weight<T>(out_channels, in_channels, {3, 3, 3}, rng)),
          g1_(init::ones_vec<T>(out_channels)),
          s1_(init::zeros_vec<T>(out_channels)),
          w2_(init::conv_weight<T>(out_channels, out_channels, {3, 3, 3}, rng)),
          g2_(init::ones_vec<T>(out_channels)),
          s2_(init::zeros_vec<T>(out_channels)) {
        if (in_channels < 1 || out_channels < 1)
            throw ConfigError("ConvBlock: channel counts must be positive");
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        if (x.rank() != 5 || x.dim(1) != in_channels_)
            throw ConfigError("ConvBlock: expected " + std::to_string(in_channels_) +
                              " input channels, got " + shape_str(x.shape()));
        Tensor<T> h = relu(instance_norm(conv3d(x, w1_, {1, 1, 1}, {1, 1, 1}), g1_, s1_));
        return relu(instance_norm(conv3d(h, w2_, {1, 1, 1}, {1, 1, 1}), g2_, s2_));
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        add_param(out, join_path(prefix, "conv1.weight"), w1_);
        add_param(out, join_path(prefix, "norm1.gain"), g1_);
        add_param(out, join_path(prefix, "norm1.shift"), s1_);
        add_param(out, join_path(prefix, "conv2.weight"), w2_);
        add_param(out, join_path(prefix, "norm2.gain"), g2_);
        add_param(out, join_path(prefix, "norm2.shift"), s2_);
    }

    int64_t in_channels() const { return in_channels_; }
    int64_t out_channels() const { return out_channels_; }

private:
    int64_t in_channels_, out_channels_;
    Tensor<T> w1_, g1_, s1_, w2_, g2_, s2_;
};

// ---------------------------------------------------------------------------
// Intra-scale SDE: squeeze-and-excite style channel gate. GAP -> 1x1x1 conv
// down -> ReLU -> 1x1x1 conv up -> sigmoid -> channel re-weighting.
// ---------------------------------------------------------------------------

template <typename T>
class IntraScaleSDE {
public:
    static constexpr int64_t kSqueezeRatio = 4;
    static constexpr int64_t kMinSqueeze = 4;

    IntraScaleSDE(int64_t channels, Rng& rng)
        : channels_(channels),
          squeezed_(std::max(channels / kSqueezeRatio, kMinSqueeze)),
          w1_(init::conv_weight<T>(squeezed_, channels, {1, 1, 1}, rng)),
          b1_(init::zeros_vec<T>(squeezed_)),
          w2_(init::conv_weight<T>(channels, squeezed_, {1, 1, 1}, rng)),
          b2_(init::zeros_vec<T>(channels)) {
        if (channels < 1) throw ConfigError("IntraScaleSDE: channels must be positive");
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        if (x.rank() != 5 || x.dim(1) != channels_)
            throw ConfigError("IntraScaleSDE: expected " + std::to_string(channels_) +
                              " channels, got " + shape_str(x.shape()));
        Tensor<T> pooled = global_avg_pool(x);
        Tensor<T> h = relu(conv3d(pooled, w1_, std::optional<Tensor<T>>(b1_)));
        Tensor<T> gate = sigmoid(conv3d(h, w2_, std::optional<Tensor<T>>(b2_)));
        return mul_channels(x, gate);
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        add_param(out, join_path(prefix, "conv1.weight"), w1_);
        add_param(out, join_path(prefix, "conv1.bias"), b1_);
        add_param(out, join_path(prefix, "conv2.weight"), w2_);
        add_param(out, join_path(prefix, "conv2.bias"), b2_);
    }

    int64_t channels() const { return channels_; }
    int64_t squeezed() const { return squeezed_; }

private:
    int64_t channels_, squeezed_;
    Tensor<T> w1_, b1_, w2_, b2_;
};

// ---------------------------------------------------------------------------
// EM attention.
// ---------------------------------------------------------------------------

struct EmaConfig {
    int64_t bases = 8;        // K
    int64_t iterations = 3;   // T
    double lambda = 1.0;      // responsibility temperature
    double momentum = 0.9;    // running-base update
};

// Per-forward diagnostics for invariant tests: one entry per EM iteration.
struct EmaTrace {
    std::vector<double> max_responsibility_row_error;  // max |sum_k Z - 1|
    std::vector<double> max_base_norm_error;           // max | ||mu_k|| - 1 | over live rows
};

// Column sums below this count as "no responsibility": the cluster keeps its
// previous base for that iteration.
constexpr double kEmaDeadCluster = 1e-12;

// One M-step: mu = l2norm(Z^T X / colsum(Z)) with dead clusters keeping their
// previous base. Factored out so the degenerate rule is directly testable.
template <typename T>
Tensor<T> em_m_step(const Tensor<T>& z, const Tensor<T>& x, const Tensor<T>& mu_prev,
                    std::vector<uint8_t>* live_out = nullptr) {
    Tensor<T> colsum = sum_mid(z);  // [N,K]
    std::vector<uint8_t> live(static_cast<size_t>(colsum.size()));
    {
        auto cv = colsum.values();
        for (size_t i = 0; i < live.size(); ++i)
            live[i] = static_cast<double>(cv[i]) > kEmaDeadCluster ? 1 : 0;
    }
    if (live_out) *live_out = live;
    // Clamp dead-row denominators so the discarded branch stays finite.
    Tensor<T> denom = Tensor<T>::zeros(colsum.shape());
    {
        auto cv = colsum.values();
        auto dv = denom.mutable_values();
        for (int64_t i = 0; i < colsum.size(); ++i)
            dv[i] = live[static_cast<size_t>(i)] ? cv[i] : T(1);
    }
    if (colsum.requires_grad() && Tape<T>::current()) {
        // denominators of live rows still need gradient; rebuild via ops
        denom.set_requires_grad(true);
        auto ci = colsum.impl(), di = denom.impl();
        auto mask = live;
        Tape<T>::current()->record(denom.impl(), [ci, mask](std::span<const T> g) {
            if (!ci->requires_grad) return;
            auto& gc = detail::grad_of(ci);
            for (size_t i = 0; i < g.size(); ++i)
                if (mask[i]) gc[i] += g[i];
        });
    }
    Tensor<T> mu_new = l2_normalize_rows(div_rows(matmul(z, x, true, false), denom));
    return where_rows(live, mu_new, mu_prev);
}

template <typename T>
class EMAModule {
public:
    EMAModule(int64_t channels, EmaConfig cfg, Rng& rng)
        : channels_(channels),
          cfg_(cfg),
          proj_in_w_(init::conv_weight<T>(channels, channels, {1, 1, 1}, rng)),
          proj_in_b_(init::zeros_vec<T>(channels)),
          proj_out_w_(init::conv_weight<T>(channels, channels, {1, 1, 1}, rng)),
          proj_out_b_(init::zeros_vec<T>(channels)),
          bases_(Tensor<T>::zeros({cfg.bases, channels}, false)) {
        if (cfg.bases < 1) throw ConfigError("EMAModule: base count K must be >= 1");
        if (cfg.iterations < 1) throw ConfigError("EMAModule: iteration count T must be >= 1");
        fill_normal(bases_, rng, 0.0, 1.0);
        normalize_bases();
    }

    // T alternations of E-step (responsibilities) and M-step (base update),
    // then reconstruction through the final responsibilities. The EM loop is
    // differentiable end to end; the stored running bases enter as constants
    // and are refreshed by momentum only in training mode.
    Tensor<T> forward(const Tensor<T>& x, bool training, EmaTrace* trace = nullptr) {
        if (x.rank() != 5 || x.dim(1) != channels_)
            throw ConfigError("EMAModule: expected " + std::to_string(channels_) +
                              " channels, got " + shape_str(x.shape()));
        const int64_t n = x.dim(0);
        const std::array<int64_t, 3> spatial{x.dim(2), x.dim(3), x.dim(4)};

        Tensor<T> projected = conv3d(x, proj_in_w_, std::optional<Tensor<T>>(proj_in_b_));
        Tensor<T> rows = rows_from_map(projected);  // [N,P,C]

        // initial bases: running state tiled per sample, constant w.r.t. grad
        Tensor<T> mu = Tensor<T>::zeros({n, cfg_.bases, channels_});
        {
            auto bv = bases_.values();
            auto mv = mu.mutable_values();
            for (int64_t b = 0; b < n; ++b)
                std::copy(bv.begin(), bv.end(), mv.begin() + b * cfg_.bases * channels_);
        }

        Tensor<T> responsibilities;
        for (int64_t it = 0; it < cfg_.iterations; ++it) {
            Tensor<T> scores = matmul(rows, mu, false, true);  // [N,P,K]
            responsibilities = softmax(affine(scores, static_cast<T>(cfg_.lambda), T(0)), 2);
            std::vector<uint8_t> live;
            mu = em_m_step(responsibilities, rows, mu, &live);
            if (trace) record_trace(*trace, responsibilities, mu, live);
        }

        Tensor<T> recon = matmul(responsibilities, mu);  // [N,P,C]
        Tensor<T> feature = map_from_rows(recon, spatial);
        Tensor<T> out = add(x, conv3d(feature, proj_out_w_, std::optional<Tensor<T>>(proj_out_b_)));

        if (training) update_running_bases(mu, n);
        return out;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        add_param(out, join_path(prefix, "proj_in.weight"), proj_in_w_);
        add_param(out, join_path(prefix, "proj_in.bias"), proj_in_b_);
        add_param(out, join_path(prefix, "proj_out.weight"), proj_out_w_);
        add_param(out, join_path(prefix, "proj_out.bias"), proj_out_b_);
        add_param(out, join_path(prefix, "bases"), bases_, /*trainable=*/false);
    }

    int64_t channels() const { return channels_; }
    const EmaConfig& config() const { return cfg_; }
    const Tensor<T>& bases() const { return bases_; }
    Tensor<T>& bases() { return bases_; }

private:
    void normalize_bases() {
        auto bv = bases_.mutable_values();
        for (int64_t k = 0; k < cfg_.bases; ++k) {
            double s = 0.0;
            for (int64_t c = 0; c < channels_; ++c)
                s += static_cast<double>(bv[k * channels_ + c]) *
                     static_cast<double>(bv[k * channels_ + c]);
            const double norm = std::sqrt(s);
            if (norm <= kEmaDeadCluster) continue;
            for (int64_t c = 0; c < channels_; ++c)
                bv[k * channels_ + c] = static_cast<T>(static_cast<double>(bv[k * channels_ + c]) / norm);
        }
    }

    void update_running_bases(const Tensor<T>& mu, int64_t n) {
        auto bv = bases_.mutable_values();
        auto mv = mu.values();
        const double m = cfg_.momentum;
        for (int64_t k = 0; k < cfg_.bases; ++k)
            for (int64_t c = 0; c < channels_; ++c) {
                double batch_mean = 0.0;
                for (int64_t b = 0; b < n; ++b)
                    batch_mean += static_cast<double>(mv[(b * cfg_.bases + k) * channels_ + c]);
                batch_mean /= static_cast<double>(n);
                bv[k * channels_ + c] =
                    static_cast<T>(m * static_cast<double>(bv[k * channels_ + c]) +
                                   (1.0 - m) * batch_mean);
            }
        normalize_bases();  // keep the unit-row invariant on stored state
    }

    static void record_trace(EmaTrace& trace, const Tensor<T>& z, const Tensor<T>& mu,
                             const std::vector<uint8_t>& live) {
        const int64_t n = z.dim(0), p = z.dim(1), k = z.dim(2);
        auto zv = z.values();
        double row_err = 0.0;
        for (int64_t i = 0; i < n * p; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < k; ++j) s += static_cast<double>(zv[i * k + j]);
            row_err = std::max(row_err, std::abs(s - 1.0));
        }
        trace.max_responsibility_row_error.push_back(row_err);

        const int64_t c = mu.dim(2);
        auto mv = mu.values();
        double norm_err = 0.0;
        for (int64_t r = 0; r < mu.dim(0) * mu.dim(1); ++r) {
            if (!live[static_cast<size_t>(r)]) continue;
            double s = 0.0;
            for (int64_t j = 0; j < c; ++j)
                s += static_cast<double>(mv[r * c + j]) * static_cast<double>(mv[r * c + j]);
            norm_err = std::max(norm_err, std::abs(std::sqrt(s) - 1.0));
        }
        trace.max_base_norm_error.push_back(norm_err);
    }

    int64_t channels_;
    EmaConfig cfg_;
    Tensor<T> proj_in_w_, proj_in_b_, proj_out_w_, proj_out_b_;
    Tensor<T> bases_;  // [K,C], unit L2 rows, updated by momentum in training
};

// ---------------------------------------------------------------------------
// Inter-scale SDE: inject a 1-channel global-context map derived from the
// coarsest branch into every branch, then restore nominal widths.
// ---------------------------------------------------------------------------

template <typename T>
class InterScaleSDE {
public:
    InterScaleSDE(std::vector<int64_t> branch_channels, Rng& rng)
        : chans_(std::move(branch_channels)) {
        if (chans_.size() < 2)
            throw ConfigError("InterScaleSDE: needs at least 2 branches, got " +
                              std::to_string(chans_.size()));
        const int64_t src = chans_.back();
        for (size_t j = 0; j < chans_.size(); ++j) {
            reduce_w_.push_back(init::conv_weight<T>(1, src, {1, 1, 1}, rng));
            reduce_b_.push_back(init::zeros_vec<T>(1));
            restore_w_.push_back(init::conv_weight<T>(chans_[j], chans_[j] + 1, {1, 1, 1}, rng));
            restore_b_.push_back(init::zeros_vec<T>(chans_[j]));
        }
    }

    std::vector<Tensor<T>> forward(const std::vector<Tensor<T>>& xs) const {
        if (xs.size() != chans_.size())
            throw ConfigError("InterScaleSDE: expected " + std::to_string(chans_.size()) +
                              " branches, got " + std::to_string(xs.size()));
        for (size_t j = 0; j < xs.size(); ++j)
            if (xs[j].dim(1) != chans_[j])
                throw ConfigError("InterScaleSDE: branch " + std::to_string(j + 1) +
                                  " channel mismatch, got " + shape_str(xs[j].shape()));
        Tensor<T> global = global_avg_pool(xs.back());
        std::vector<Tensor<T>> out;
        out.reserve(xs.size());
        for (size_t j = 0; j < xs.size(); ++j) {
            Tensor<T> context =
                conv3d(global, reduce_w_[j], std::optional<Tensor<T>>(reduce_b_[j]));
            Tensor<T> spread =
                trilinear_resize(context, {xs[j].dim(2), xs[j].dim(3), xs[j].dim(4)});
            Tensor<T> cat = concat_channels<T>({xs[j], spread});
            out.push_back(conv3d(cat, restore_w_[j], std::optional<Tensor<T>>(restore_b_[j])));
        }
        return out;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        for (size_t j = 0; j < chans_.size(); ++j) {
            add_param(out, join_path(prefix, "reduce" + std::to_string(j + 1) + ".weight"),
                      reduce_w_[j]);
            add_param(out, join_path(prefix, "reduce" + std::to_string(j + 1) + ".bias"),
                      reduce_b_[j]);
            add_param(out, join_path(prefix, "restore" + std::to_string(j + 1) + ".weight"),
                      restore_w_[j]);
            add_param(out, join_path(prefix, "restore" + std::to_string(j + 1) + ".bias"),
                      restore_b_[j]);
        }
    }

    size_t branches() const { return chans_.size(); }

private:
    std::vector<int64_t> chans_;
    std::vector<Tensor<T>> reduce_w_, reduce_b_, restore_w_, restore_b_;
};

// ---------------------------------------------------------------------------
// PMF module: per-branch ConvBlock (optionally gated by an intra-scale SDE),
// then fully connected fusion across branches. Downsampling paths are chains
// of 2-stride convs (one per octave); upsampling paths are 1x1x1 conv +
// trilinear interpolation; the i==j path is the identity.
// ---------------------------------------------------------------------------

template <typename T>
class PMFModule {
public:
    PMFModule(std::vector<int64_t> branch_channels, bool intra_sde, Rng& rng)
        : chans_(std::move(branch_channels)), intra_enabled_(intra_sde) {
        const size_t b = chans_.size();
        if (b < 2 || b > 4)
            throw ConfigError("PMFModule: branch count must be in [2,4], got " +
                              std::to_string(b));
        for (size_t i = 0; i < b; ++i) {
            branches_.emplace_back(chans_[i], chans_[i], rng);
            if (intra_enabled_) intra_.emplace_back(chans_[i], rng);
        }
        // fusion paths, source-major order
        down_w_.resize(b * b);
        down_b_.resize(b * b);
        up_w_.resize(b * b);
        up_b_.resize(b * b);
        for (size_t i = 0; i < b; ++i)
            for (size_t j = 0; j < b; ++j) {
                if (i == j) continue;
                if (i < j) {
                    const size_t gap = j - i;
                    auto& chain_w = down_w_[i * b + j];
                    auto& chain_b = down_b_[i * b + j];
                    for (size_t t = 0; t < gap; ++t) {
                        const int64_t cin = chans_[i];
                        const int64_t cout = (t + 1 == gap) ? chans_[j] : chans_[i];
                        chain_w.push_back(init::conv_weight<T>(cout, cin, {3, 3, 3}, rng));
                        chain_b.push_back(init::zeros_vec<T>(cout));
                    }
                } else {
                    up_w_[i * b + j] = init::conv_weight<T>(chans_[j], chans_[i], {1, 1, 1}, rng);
                    up_b_[i * b + j] = init::zeros_vec<T>(chans_[j]);
                }
            }
    }

    std::vector<Tensor<T>> forward(const std::vector<Tensor<T>>& xs) const {
        const size_t b = chans_.size();
        if (xs.size() != b)
            throw ConfigError("PMFModule: expected " + std::to_string(b) + " branches, got " +
                              std::to_string(xs.size()));
        for (size_t i = 0; i < b; ++i) {
            if (xs[i].rank() != 5 || xs[i].dim(1) != chans_[i])
                throw ConfigError("PMFModule: branch " + std::to_string(i + 1) +
                                  " expects " + std::to_string(chans_[i]) + " channels, got " +
                                  shape_str(xs[i].shape()));
            if (i > 0)
                for (int a = 2; a < 5; ++a)
                    if (xs[i].dim(a) != xs[i - 1].dim(a) / 2)
                        throw ConfigError(
                            "PMFModule: branch " + std::to_string(i + 1) +
                            " must be the floor-halved extent of branch " + std::to_string(i) +
                            ", got " + shape_str(xs[i].shape()) + " after " +
                            shape_str(xs[i - 1].shape()));
        }

        std::vector<Tensor<T>> feats;
        feats.reserve(b);
        for (size_t i = 0; i < b; ++i) {
            Tensor<T> f = branches_[i].forward(xs[i]);
            if (intra_enabled_) f = intra_[i].forward(f);
            feats.push_back(std::move(f));
        }

        std::vector<Tensor<T>> fused;
        fused.reserve(b);
        for (size_t j = 0; j < b; ++j) {
            Tensor<T> acc = feats[j];  // identity path
            for (size_t i = 0; i < b; ++i) {
                if (i == j) continue;
                acc = add(acc, fusion_path(i, j, feats[i], xs[j]));
            }
            fused.push_back(std::move(acc));
        }
        return fused;
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        const size_t b = chans_.size();
        for (size_t i = 0; i < b; ++i) {
            branches_[i].collect(join_path(prefix, "branch" + std::to_string(i + 1)), out);
            if (intra_enabled_)
                intra_[i].collect(join_path(prefix, "sde" + std::to_string(i + 1)), out);
        }
        for (size_t i = 0; i < b; ++i)
            for (size_t j = 0; j < b; ++j) {
                if (i == j) continue;
                const std::string path = join_path(
                    prefix, "fuse.b" + std::to_string(i + 1) + "_to_b" + std::to_string(j + 1));
                if (i < j) {
                    const auto& chain_w = down_w_[i * b + j];
                    const auto& chain_b = down_b_[i * b + j];
                    for (size_t t = 0; t < chain_w.size(); ++t) {
                        add_param(out, path + ".conv" + std::to_string(t + 1) + ".weight",
                                  chain_w[t]);
                        add_param(out, path + ".conv" + std::to_string(t + 1) + ".bias",
                                  chain_b[t]);
                    }
                } else {
                    add_param(out, path + ".conv1.weight", up_w_[i * b + j]);
                    add_param(out, path + ".conv1.bias", up_b_[i * b + j]);
                }
            }
    }

    size_t branches() const { return chans_.size(); }
    const std::vector<int64_t>& channels() const { return chans_; }
    bool intra_enabled() const { return intra_enabled_; }

private:
    Tensor<T> fusion_path(size_t i, size_t j, const Tensor<T>& feat,
                          const Tensor<T>& target_like) const {
        const size_t b = chans_.size();
        if (i < j) {
            Tensor<T> h = feat;
            const auto& chain_w = down_w_[i * b + j];
            const auto& chain_b = down_b_[i * b + j];
            for (size_t t = 0; t < chain_w.size(); ++t)
                h = conv3d(h, chain_w[t], std::optional<Tensor<T>>(chain_b[t]), {2, 2, 2},
                           {1, 1, 1});
            return h;
        }
        Tensor<T> h = conv3d(feat, up_w_[i * b + j], std::optional<Tensor<T>>(up_b_[i * b + j]));
        return trilinear_resize(h, {target_like.dim(2), target_like.dim(3), target_like.dim(4)});
    }

    std::vector<int64_t> chans_;
    bool intra_enabled_;
    std::vector<ConvBlock<T>> branches_;
    std::vector<IntraScaleSDE<T>> intra_;
    std::vector<std::vector<Tensor<T>>> down_w_, down_b_;
    std::vector<Tensor<T>> up_w_, up_b_;
};

}  // namespace hnf
