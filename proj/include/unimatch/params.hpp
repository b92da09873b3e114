#pragma once

#include <string>
#include <vector>

#include "unimatch/tensor.hpp"

namespace unimatch {

enum class ParamGroup { untagged, encoder, decoder };
enum class ParamKind { parameter, buffer };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::decoder: return "decoder";
    default: return "untagged";
  }
}

/// A named tensor in a model's parameter tree. Buffers (non-learned
/// statistics) carry no gradient and are copied, not averaged, by the EMA.
template <typename T>
struct BasicParameter {
  std::string name;
  ParamGroup group = ParamGroup::untagged;
  ParamKind kind = ParamKind::parameter;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  BasicParameter() = default;
  BasicParameter(std::string n, ParamGroup g, Tensor<T> v, ParamKind k = ParamKind::parameter)
      : name(std::move(n)), group(g), kind(k), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T{0}); }
};

using Parameter = BasicParameter<float>;

/// Anything exposing its parameter tree in a stable order.
template <typename M>
concept ParameterTree = requires(M& m, const M& cm) {
  { m.parameters() };
  { cm.parameters() };
};

template <ParameterTree M>
void zero_grad(M& model) {
  for (auto* p : model.parameters()) p->zero_grad();
}

template <ParameterTree M>
std::size_t parameter_count(const M& model) {
  std::size_t n = 0;
  for (const auto* p : model.parameters())
    if (p->kind == ParamKind::parameter) n += p->value.size();
  return n;
}

/// Same names, kinds and shapes in the same order.
template <ParameterTree A, ParameterTree B>
bool same_structure(const A& a, const B& b) {
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->name != pb[i]->name || pa[i]->kind != pb[i]->kind ||
        pa[i]->value.shape() != pb[i]->value.shape())
      return false;
  return true;
}

}  // namespace unimatch
