#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "bixformer/autodiff.hpp"
#include "bixformer/error.hpp"
#include "json.hpp"

namespace bixformer {

// Parameter bundles are class templates over their storage, P<Tensor> for
// values and P<Var> for a tape binding. Each provides
//   template <class F> void visit(F&& f)        // f(name, field&)
//   template <class F> void visit(F&& f) const
// enumerating fields in a fixed order.

template <template <class> class P>
P<Var> bind(Tape& tape, const P<Tensor>& params, bool requires_grad = true) {
  std::vector<Var> vars;
  params.visit([&](const std::string&, const Tensor& t) { vars.push_back(tape.leaf(t, requires_grad)); });
  P<Var> out;
  std::size_t i = 0;
  out.visit([&](const std::string&, Var& v) { v = vars[i++]; });
  return out;
}

/// Gradients of the last backward() laid out like the parameters.
template <template <class> class P>
P<Tensor> gradients(const Tape& tape, const P<Var>& vars) {
  std::vector<Tensor> grads;
  vars.visit([&](const std::string&, const Var& v) { grads.push_back(tape.grad(v)); });
  P<Tensor> out;
  std::size_t i = 0;
  out.visit([&](const std::string&, Tensor& t) { t = std::move(grads[i++]); });
  return out;
}

template <class Params>
std::vector<Tensor*> flatten(Params& p) {
  std::vector<Tensor*> out;
  p.visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

template <class Params>
std::vector<const Tensor*> flatten(const Params& p) {
  std::vector<const Tensor*> out;
  p.visit([&](const std::string&, const Tensor& t) { out.push_back(&t); });
  return out;
}

/// {"name": {"shape": [...], "data": [...]}, ...} with `prefix` on names.
template <class Params>
void params_to_json(const Params& p, const std::string& prefix, nlohmann::ordered_json& out) {
  p.visit([&](const std::string& name, const Tensor& t) {
    nlohmann::ordered_json e;
    e["shape"] = t.shape();
    e["data"] = t.values();
    out[prefix + name] = std::move(e);
  });
}

template <class Params>
void params_from_json(Params& p, const std::string& prefix, const nlohmann::json& in) {
  p.visit([&](const std::string& name, Tensor& t) {
    const std::string key = prefix + name;
    if (!in.contains(key)) throw ParseError("checkpoint lacks parameter '" + key + "'");
    try {
      Tensor loaded(in.at(key).at("shape").get<Shape>(), in.at(key).at("data").get<std::vector<double>>());
      if (loaded.shape() != t.shape())
        throw ParseError("parameter '" + key + "' has shape " + shape_str(loaded.shape()) + ", expected " +
                         shape_str(t.shape()));
      t = std::move(loaded);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("parameter '" + key + "': " + e.what());
    } catch (const DimensionError& e) {
      throw ParseError("parameter '" + key + "': " + e.what());
    }
  });
}

}  // namespace bixformer
