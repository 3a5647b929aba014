#pragma once

#include <string>
#include <vector>

#include "hnf/tensor.hpp"

namespace hnf {

// One named state entry of a module tree. Trainable entries receive gradients
// and optimizer updates; non-trainable entries (EMA running bases) are carried
// through checkpoints untouched by the optimizer.
template <typename T>
struct ParamEntry {
    std::string name;  // hierarchical path, e.g. "pmf3.branch2.conv1.weight"
    Tensor<T> tensor;
    bool trainable = true;
};

template <typename T>
using ParamList = std::vector<ParamEntry<T>>;

template <typename T>
void add_param(ParamList<T>& out, const std::string& name, const Tensor<T>& t,
               bool trainable = true) {
    out.push_back(ParamEntry<T>{name, t, trainable});
}

inline std::string join_path(const std::string& prefix, const std::string& leaf) {
    return prefix.empty() ? leaf : prefix + "." + leaf;
}

}  // namespace hnf
