#pragma once

#include <map>
#include <optional>
#include <set>

#include <json.hpp>

#include "hnf/blocks.hpp"

namespace hnf {

// Architectural hyperparameters. Five scales (r .. 1/16r), four cascaded PMF
// modules with branch counts (2,3,4,4), channels doubling per octave capped
// at 16x the base width. The inter-scale SDE block, when enabled, sits
// between PMF module 3 and PMF module 4.
struct NetworkConfig {
    int64_t in_channels = 4;
    int64_t out_channels = 3;  // region logits: WT, TC, ET
    int64_t base_channels = 8;
    int64_t channel_multiplier = 2;
    EmaConfig ema;
    bool intra_sde_enabled = true;
    bool inter_sde_enabled = true;
    uint64_t seed = 20211001;

    static constexpr int kScales = 5;
    static constexpr int kPmfModules = 4;
    static constexpr std::array<int, 4> kBranchCounts{2, 3, 4, 4};

    // channels at scale index s (0 = full resolution r)
    int64_t channels_at(int s) const {
        int64_t ch = base_channels;
        for (int i = 0; i < s; ++i) ch *= channel_multiplier;
        return std::min(ch, 16 * base_channels);
    }

    // width of the mixed features entering the EMA module: four branches
    // recovered to the 1/2r scale at that scale's nominal width
    int64_t ema_channels() const { return 4 * channels_at(1); }

    void validate() const {
        if (in_channels < 1 || out_channels < 1 || base_channels < 1)
            throw ConfigError("NetworkConfig: channel counts must be positive");
        if (channel_multiplier < 1)
            throw ConfigError("NetworkConfig: channel multiplier must be >= 1");
        if (ema.bases < 1) throw ConfigError("NetworkConfig: EMA base count must be >= 1");
        if (ema.iterations < 1) throw ConfigError("NetworkConfig: EMA iterations must be >= 1");
        if (ema.momentum < 0.0 || ema.momentum > 1.0)
            throw ConfigError("NetworkConfig: EMA momentum must lie in [0,1]");
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"in_channels", in_channels},
                              {"out_channels", out_channels},
                              {"base_channels", base_channels},
                              {"channel_multiplier", channel_multiplier},
                              {"ema",
                               {{"bases", ema.bases},
                                {"iterations", ema.iterations},
                                {"lambda", ema.lambda},
                                {"momentum", ema.momentum}}},
                              {"intra_sde_enabled", intra_sde_enabled},
                              {"inter_sde_enabled", inter_sde_enabled},
                              {"seed", seed}};
    }

    static NetworkConfig from_json(const nlohmann::json& j) {
        NetworkConfig c;
        c.in_channels = j.value("in_channels", c.in_channels);
        c.out_channels = j.value("out_channels", c.out_channels);
        c.base_channels = j.value("base_channels", c.base_channels);
        c.channel_multiplier = j.value("channel_multiplier", c.channel_multiplier);
        if (j.contains("ema")) {
            const auto& e = j.at("ema");
            c.ema.bases = e.value("bases", c.ema.bases);
            c.ema.iterations = e.value("iterations", c.ema.iterations);
            c.ema.lambda = e.value("lambda", c.ema.lambda);
            c.ema.momentum = e.value("momentum", c.ema.momentum);
        }
        c.intra_sde_enabled = j.value("intra_sde_enabled", c.intra_sde_enabled);
        c.inter_sde_enabled = j.value("inter_sde_enabled", c.inter_sde_enabled);
        c.seed = j.value("seed", c.seed);
        c.validate();
        return c;
    }

    // nlohmann::json orders object keys, so dump() is canonical.
    std::string canonical_json() const { return to_json().dump(); }
    uint64_t hash() const { return fnv1a64(canonical_json()); }
};

struct ParameterReport {
    int64_t total = 0;
    std::map<std::string, int64_t> per_module;
};

template <typename T>
class Network {
public:
    explicit Network(const NetworkConfig& config) : cfg_(config) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        const int64_t c = cfg_.base_channels;
        const int64_t c1 = cfg_.channels_at(1), c2 = cfg_.channels_at(2),
                      c3 = cfg_.channels_at(3), c4 = cfg_.channels_at(4);

        enc1_.emplace(cfg_.in_channels, c, rng);
        enc2_.emplace(c, c, rng);
        entry1_w_ = init::conv_weight<T>(c1, c, {3, 3, 3}, rng);
        entry1_b_ = init::zeros_vec<T>(c1);
        entry2_w_ = init::conv_weight<T>(c2, c1, {3, 3, 3}, rng);
        entry2_b_ = init::zeros_vec<T>(c2);

        pmf_.emplace_back(std::vector<int64_t>{c1, c2}, cfg_.intra_sde_enabled, rng);
        trans2_w_ = init::conv_weight<T>(c3, c2, {3, 3, 3}, rng);
        trans2_b_ = init::zeros_vec<T>(c3);
        pmf_.emplace_back(std::vector<int64_t>{c1, c2, c3}, cfg_.intra_sde_enabled, rng);
        trans3_w_ = init::conv_weight<T>(c4, c3, {3, 3, 3}, rng);
        trans3_b_ = init::zeros_vec<T>(c4);
        pmf_.emplace_back(std::vector<int64_t>{c1, c2, c3, c4}, cfg_.intra_sde_enabled, rng);
        if (cfg_.inter_sde_enabled)
            isde_.emplace(std::vector<int64_t>{c1, c2, c3, c4}, rng);
        pmf_.emplace_back(std::vector<int64_t>{c1, c2, c3, c4}, cfg_.intra_sde_enabled, rng);

        for (int64_t ch : {c2, c3, c4}) {
            recover_w_.push_back(init::conv_weight<T>(c1, ch, {1, 1, 1}, rng));
            recover_b_.push_back(init::zeros_vec<T>(c1));
        }
        ema_.emplace(cfg_.ema_channels(), cfg_.ema, rng);
        recover_full_w_ = init::conv_weight<T>(c, cfg_.ema_channels(), {1, 1, 1}, rng);
        recover_full_b_ = init::zeros_vec<T>(c);
        dec1_.emplace(c, c, rng);
        dec2_.emplace(c, c, rng);
        head_w_ = init::conv_weight<T>(cfg_.out_channels, c, {1, 1, 1}, rng);
        head_b_ = init::zeros_vec<T>(cfg_.out_channels);

        build_registry();
    }

    // N x in x D x H x W -> N x out x D x H x W region logits. Extents must be
    // divisible by 16 (five-scale hierarchy). Every stage output is scanned
    // for non-finite values when numeric checks are on.
    Tensor<T> forward(const Tensor<T>& x, bool training) {
        validate_input(x);
        Tensor<T> e = enc2_->forward(enc1_->forward(x));
        check(e, "encoder");

        Tensor<T> b1 = downsample(e, entry1_w_, entry1_b_, "entry1");
        Tensor<T> b2 = downsample(b1, entry2_w_, entry2_b_, "entry2");

        std::vector<Tensor<T>> v = pmf_[0].forward({b1, b2});
        check(v, "pmf1");
        Tensor<T> t3 = downsample(v[1], trans2_w_, trans2_b_, "trans2");
        v = pmf_[1].forward({v[0], v[1], t3});
        check(v, "pmf2");
        Tensor<T> t4 = downsample(v[2], trans3_w_, trans3_b_, "trans3");
        v = pmf_[2].forward({v[0], v[1], v[2], t4});
        check(v, "pmf3");
        if (isde_) {
            v = isde_->forward(v);
            check(v, "isde");
        }
        v = pmf_[3].forward(v);
        check(v, "pmf4");

        std::vector<Tensor<T>> recovered{v[0]};
        const std::array<int64_t, 3> half{v[0].dim(2), v[0].dim(3), v[0].dim(4)};
        for (size_t j = 1; j < v.size(); ++j) {
            Tensor<T> r =
                conv3d(v[j], recover_w_[j - 1], std::optional<Tensor<T>>(recover_b_[j - 1]));
            recovered.push_back(trilinear_resize(r, half));
        }
        Tensor<T> mixed = concat_channels(recovered);
        check(mixed, "recover");

        Tensor<T> att = ema_->forward(mixed, training);
        check(att, "ema");

        Tensor<T> full = trilinear_resize(
            conv3d(att, recover_full_w_, std::optional<Tensor<T>>(recover_full_b_)),
            {x.dim(2), x.dim(3), x.dim(4)});
        Tensor<T> fused = add(full, e);
        check(fused, "recover_full");

        Tensor<T> d = dec2_->forward(dec1_->forward(fused));
        check(d, "decoder");
        Tensor<T> out = conv3d(d, head_w_, std::optional<Tensor<T>>(head_b_));
        check(out, "head");
        return out;
    }

    const ParamList<T>& parameters() const { return registry_; }

    Tensor<T> find_parameter(const std::string& name) const {
        for (const auto& p : registry_)
            if (p.name == name) return p.tensor;
        throw ConfigError("no parameter named '" + name + "'");
    }

    // Trainable parameters only; running statistics (EMA bases) are buffers.
    ParameterReport count_parameters() const {
        ParameterReport rep;
        for (const auto& p : registry_) {
            if (!p.trainable) continue;
            rep.total += p.tensor.size();
            rep.per_module[module_of(p.name)] += p.tensor.size();
        }
        return rep;
    }

    // Forward-pass FLOPs of the dominant ops (conv + matmul) at a given input
    // size; used only for coarse architecture comparisons.
    int64_t estimate_flops(std::array<int64_t, 3> spatial) {
        Tensor<T> x = Tensor<T>::zeros({1, cfg_.in_channels, spatial[0], spatial[1], spatial[2]});
        int64_t flops = 0;
        flop_counter() = &flops;
        const bool checks = numeric_checks_;
        numeric_checks_ = false;
        try {
            forward(x, false);
        } catch (...) {
            flop_counter() = nullptr;
            numeric_checks_ = checks;
            throw;
        }
        flop_counter() = nullptr;
        numeric_checks_ = checks;
        return flops;
    }

    const NetworkConfig& config() const { return cfg_; }
    EMAModule<T>& ema() { return *ema_; }
    void set_numeric_checks(bool on) { numeric_checks_ = on; }

private:
    Tensor<T> downsample(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                         const char* path) const {
        Tensor<T> out = conv3d(x, w, std::optional<Tensor<T>>(b), {2, 2, 2}, {1, 1, 1});
        check(out, path);
        return out;
    }

    void validate_input(const Tensor<T>& x) const {
        if (x.rank() != 5 || x.dim(1) != cfg_.in_channels)
            throw ConfigError("Network: expected input [N," + std::to_string(cfg_.in_channels) +
                              ",D,H,W], got " + shape_str(x.shape()));
        static constexpr const char* axis_names[3] = {"depth", "height", "width"};
        for (int a = 0; a < 3; ++a)
            if (x.dim(2 + a) % 16 != 0)
                throw InputError("Network: input " + std::string(axis_names[a]) + " " +
                                 std::to_string(x.dim(2 + a)) + " is not divisible by 16");
    }

    void check(const Tensor<T>& t, const std::string& path) const {
        if (numeric_checks_) assert_all_finite(t, path);
    }
    void check(const std::vector<Tensor<T>>& ts, const std::string& path) const {
        if (!numeric_checks_) return;
        for (size_t i = 0; i < ts.size(); ++i)
            assert_all_finite(ts[i], path + ".b" + std::to_string(i + 1));
    }

    void build_registry() {
        registry_.clear();
        enc1_->collect("enc1", registry_);
        enc2_->collect("enc2", registry_);
        add_param(registry_, "entry1.weight", entry1_w_);
        add_param(registry_, "entry1.bias", entry1_b_);
        add_param(registry_, "entry2.weight", entry2_w_);
        add_param(registry_, "entry2.bias", entry2_b_);
        for (size_t m = 0; m < pmf_.size(); ++m)
            pmf_[m].collect("pmf" + std::to_string(m + 1), registry_);
        add_param(registry_, "trans2.weight", trans2_w_);
        add_param(registry_, "trans2.bias", trans2_b_);
        add_param(registry_, "trans3.weight", trans3_w_);
        add_param(registry_, "trans3.bias", trans3_b_);
        if (isde_) isde_->collect("isde", registry_);
        for (size_t j = 0; j < recover_w_.size(); ++j) {
            add_param(registry_, "recover.b" + std::to_string(j + 2) + ".weight", recover_w_[j]);
            add_param(registry_, "recover.b" + std::to_string(j + 2) + ".bias", recover_b_[j]);
        }
        ema_->collect("ema", registry_);
        add_param(registry_, "recover_full.weight", recover_full_w_);
        add_param(registry_, "recover_full.bias", recover_full_b_);
        dec1_->collect("dec1", registry_);
        dec2_->collect("dec2", registry_);
        add_param(registry_, "head.weight", head_w_);
        add_param(registry_, "head.bias", head_b_);

        std::set<std::string> seen;
        for (const auto& p : registry_)
            if (!seen.insert(p.name).second)
                throw ConfigError("duplicate parameter name '" + p.name + "'");
    }

    static std::string module_of(const std::string& name) {
        const size_t dot = name.find('.');
        return dot == std::string::npos ? name : name.substr(0, dot);
    }

    NetworkConfig cfg_;
    bool numeric_checks_ = true;
    std::optional<ConvBlock<T>> enc1_, enc2_, dec1_, dec2_;
    Tensor<T> entry1_w_, entry1_b_, entry2_w_, entry2_b_;
    Tensor<T> trans2_w_, trans2_b_, trans3_w_, trans3_b_;
    std::vector<PMFModule<T>> pmf_;
    std::optional<InterScaleSDE<T>> isde_;
    std::vector<Tensor<T>> recover_w_, recover_b_;
    std::optional<EMAModule<T>> ema_;
    Tensor<T> recover_full_w_, recover_full_b_;
    Tensor<T> head_w_, head_b_;
    ParamList<T> registry_;
};

using NetworkF = Network<float>;
using NetworkD = Network<double>;

}  // namespace hnf
