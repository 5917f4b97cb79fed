// Single-document JSON checkpoints: model configuration, kernel parameters,
// inducing state (row-major arrays) and dataset standardization, guarded by a
// format-version field.
#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <utility>

#include <json.hpp>

#include "gpdd/common.hpp"
#include "gpdd/data.hpp"
#include "gpdd/errors.hpp"
#include "gpdd/variational.hpp"

namespace gpdd::vi {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelSpec spec;
  RbfParams params;
  InducingState state;
  Standardization std_;
};

namespace detail {

using Json = nlohmann::json;

inline Json mat_to_json(const Mat& m) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) a.push_back(m(i, j));
  }
  return a;
}

inline Json vec_to_json(const Vec& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline Mat mat_from_json(const Json& a, Eigen::Index rows, Eigen::Index cols,
                         const std::string& key) {
  if (!a.is_array() || static_cast<Eigen::Index>(a.size()) != rows * cols) {
    throw SchemaError("field '" + key + "' must hold " + std::to_string(rows * cols) +
                      " reals");
  }
  Mat m(rows, cols);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = a[static_cast<std::size_t>(k++)].get<double>();
  }
  return m;
}

inline Vec vec_from_json(const Json& a, Eigen::Index n, const std::string& key) {
  Mat m = mat_from_json(a, n, 1, key);
  return m.col(0);
}

inline const Json& field(const Json& j, const std::string& key) {
  auto it = j.find(key);
  if (it == j.end()) throw SchemaError("missing field '" + key + "'");
  return *it;
}

inline std::string loss_name(Loss l) { return l == Loss::Elbo ? "elbo" : "predictive"; }
inline std::string dirs_name(DirectionMode d) {
  switch (d) {
    case DirectionMode::None: return "none";
    case DirectionMode::CanonicalFixed: return "canonical";
    default: return "learned";
  }
}
inline std::string vform_name(VarianceForm v) {
  return v == VarianceForm::Solve ? "solve" : "quadratic";
}

inline Loss loss_of(const std::string& s) {
  if (s == "elbo") return Loss::Elbo;
  if (s == "predictive") return Loss::Predictive;
  throw SchemaError("unknown loss '" + s + "'");
}
inline DirectionMode dirs_of(const std::string& s) {
  if (s == "none") return DirectionMode::None;
  if (s == "canonical") return DirectionMode::CanonicalFixed;
  if (s == "learned") return DirectionMode::Learned;
  throw SchemaError("unknown direction mode '" + s + "'");
}
inline VarianceForm vform_of(const std::string& s) {
  if (s == "solve") return VarianceForm::Solve;
  if (s == "quadratic") return VarianceForm::Quadratic;
  throw SchemaError("unknown variance form '" + s + "'");
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  using detail::Json;
  Json j;
  j["format_version"] = kCheckpointVersion;
  j["model"] = {{"loss", detail::loss_name(ck.spec.loss)},
                {"directions", detail::dirs_name(ck.spec.dirs)},
                {"p", ck.spec.p},
                {"variance_form", detail::vform_name(ck.spec.vform)}};
  j["kernel"] = {{"ell", detail::vec_to_json(ck.params.ell)},
                 {"sf2", ck.params.sf2},
                 {"mu0", ck.params.mu0},
                 {"noise_y", ck.params.noise_y},
                 {"noise_g", ck.params.noise_g}};
  j["inducing"] = {{"M", ck.state.M()},
                   {"p", ck.state.p()},
                   {"D", ck.state.Z.cols()},
                   {"Z", detail::mat_to_json(ck.state.Z)},
                   {"V", detail::mat_to_json(ck.state.V.V)},
                   {"mbar", detail::vec_to_json(ck.state.mbar)},
                   {"Lbar", detail::mat_to_json(ck.state.Lbar)}};
  j["standardization"] = {{"x_shift", detail::vec_to_json(ck.std_.x_shift)},
                          {"x_scale", detail::vec_to_json(ck.std_.x_scale)},
                          {"y_shift", ck.std_.y_shift},
                          {"y_scale", ck.std_.y_scale}};
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw SchemaError("cannot write '" + tmp + "'");
    out << j.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open '" + path + "'");
  detail::Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw SchemaError("invalid JSON in '" + path + "': " + e.what());
  }
  const int version = detail::field(j, "format_version").get<int>();
  if (version != kCheckpointVersion) {
    throw SchemaError("format_version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  const auto& model = detail::field(j, "model");
  ck.spec.loss = detail::loss_of(detail::field(model, "loss").get<std::string>());
  ck.spec.dirs = detail::dirs_of(detail::field(model, "directions").get<std::string>());
  ck.spec.p = detail::field(model, "p").get<int>();
  ck.spec.vform = detail::vform_of(detail::field(model, "variance_form").get<std::string>());

  const auto& kernel = detail::field(j, "kernel");
  const auto& ell = detail::field(kernel, "ell");
  ck.params.ell = detail::vec_from_json(ell, static_cast<Eigen::Index>(ell.size()), "ell");
  ck.params.sf2 = detail::field(kernel, "sf2").get<double>();
  ck.params.mu0 = detail::field(kernel, "mu0").get<double>();
  ck.params.noise_y = detail::field(kernel, "noise_y").get<double>();
  ck.params.noise_g = detail::field(kernel, "noise_g").get<double>();

  const auto& ind = detail::field(j, "inducing");
  const auto M = detail::field(ind, "M").get<Eigen::Index>();
  const int p = detail::field(ind, "p").get<int>();
  const auto D = detail::field(ind, "D").get<Eigen::Index>();
  const Eigen::Index R = M * (p + 1);
  ck.state.Z = detail::mat_from_json(detail::field(ind, "Z"), M, D, "Z");
  ck.state.V.M = static_cast<int>(M);
  ck.state.V.p = p;
  ck.state.V.V = detail::mat_from_json(detail::field(ind, "V"), M * p, D, "V");
  ck.state.mbar = detail::vec_from_json(detail::field(ind, "mbar"), R, "mbar");
  ck.state.Lbar = detail::mat_from_json(detail::field(ind, "Lbar"), R, R, "Lbar");

  const auto& std_ = detail::field(j, "standardization");
  ck.std_.x_shift = detail::vec_from_json(detail::field(std_, "x_shift"), D, "x_shift");
  ck.std_.x_scale = detail::vec_from_json(detail::field(std_, "x_scale"), D, "x_scale");
  ck.std_.y_shift = detail::field(std_, "y_shift").get<double>();
  ck.std_.y_scale = detail::field(std_, "y_scale").get<double>();

  ck.params.validate();
  ck.spec.validate(static_cast<int>(D));
  ck.state.V.validate(static_cast<int>(D));
  return ck;
}

}  // namespace gpdd::vi
