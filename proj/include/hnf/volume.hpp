#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hnf/common.hpp"

namespace hnf {

// Plain dense volume in canonical D x H x W order (W fastest-varying).
template <typename T>
struct Volume {
    std::array<int64_t, 3> shape{0, 0, 0};
    std::vector<T> data;

    Volume() = default;
    Volume(std::array<int64_t, 3> s, T fill = T(0))
        : shape(s), data(static_cast<size_t>(s[0] * s[1] * s[2]), fill) {}

    int64_t size() const { return shape[0] * shape[1] * shape[2]; }

    T& at(int64_t d, int64_t h, int64_t w) {
        return data[static_cast<size_t>((d * shape[1] + h) * shape[2] + w)];
    }
    T at(int64_t d, int64_t h, int64_t w) const {
        return data[static_cast<size_t>((d * shape[1] + h) * shape[2] + w)];
    }
    bool in_bounds(int64_t d, int64_t h, int64_t w) const {
        return d >= 0 && d < shape[0] && h >= 0 && h < shape[1] && w >= 0 && w < shape[2];
    }
};

using VolumeF = Volume<float>;
using VolumeU8 = Volume<uint8_t>;

// BraTS label volume: 0 background, 1 NCR/NET, 2 ED, 4 ET.
struct LabelVolume {
    VolumeU8 vol;

    static bool valid_value(uint8_t v) { return v == 0 || v == 1 || v == 2 || v == 4; }

    void validate(const std::string& context) const {
        for (uint8_t v : vol.data)
            if (!valid_value(v))
                throw InputError("invalid label value " + std::to_string(int(v)) + " in " +
                                 context + " (allowed: 0,1,2,4)");
    }

    std::array<int64_t, 3> shape() const { return vol.shape; }
};

// One subject: four co-registered modality volumes plus optional labels.
// Modality order is fixed: T1, T1ce, T2, Flair.
struct Study {
    static constexpr int kModalities = 4;
    static constexpr std::array<const char*, 4> kModalityNames{"t1", "t1ce", "t2", "flair"};

    std::string id;
    std::array<VolumeF, 4> modalities;
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};  // mm per axis, (D,H,W) order
    std::optional<LabelVolume> label;

    std::array<int64_t, 3> shape() const { return modalities[0].shape; }

    void validate() const {
        for (int m = 1; m < kModalities; ++m)
            if (modalities[static_cast<size_t>(m)].shape != modalities[0].shape)
                throw InputError("study " + id + ": modality " + kModalityNames[static_cast<size_t>(m)] +
                                 " shape differs from t1");
        if (label && label->shape() != modalities[0].shape)
            throw InputError("study " + id + ": label shape differs from image shape");
        if (label) label->validate("study " + id);
    }
};

// Binary WT/TC/ET masks derived from a label volume.
struct RegionMasks {
    VolumeU8 wt, tc, et;
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
};

}  // namespace hnf
