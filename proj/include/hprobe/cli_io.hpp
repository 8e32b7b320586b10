#pragma once

// File formats and the command-line front end.
//
// Tabular data is CSV with a header row. Models and configs are JSON; model
// files store every floating-point value as its shortest round-trip decimal
// string so that a load/save cycle reproduces the file byte for byte.

#include "hprobe/diagnostics.hpp"
#include "hprobe/ecm_engine.hpp"
#include "hprobe/model_core.hpp"
#include "hprobe/prediction.hpp"
#include "hprobe/sim_harness.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace hprobe::io {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Numbers

/// Shortest decimal string that parses back to the same double.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

/// Parses a whole string as a double. Accepts "nan", "inf" and "-inf".
inline std::optional<double> parse_double(std::string_view s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

// ---------------------------------------------------------------------------
// CSV

struct CsvTable {
  std::vector<std::string> header;
  Matrix values;

  Index column(const std::string& name) const {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return static_cast<Index>(j);
    return -1;
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string unquote(std::string_view s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return std::string(s);
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

/// Reads a numeric CSV with a header row. Data rows are numbered from 1 in
/// error messages. Blank lines are skipped.
inline CsvTable read_csv(std::istream& in, const std::string& source = "csv") {
  CsvTable table;
  std::string line;
  bool have_header = false;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    const std::string_view view = detail::trim(line);
    if (view.empty()) continue;
    const auto fields = detail::split_fields(view);
    if (!have_header) {
      for (auto f : fields) table.header.push_back(detail::unquote(f));
      have_header = true;
      continue;
    }
    const std::size_t r = rows.size() + 1;
    if (fields.size() != table.header.size())
      throw DataError(source + ": row " + std::to_string(r) + " has " +
                      std::to_string(fields.size()) + " fields, header has " +
                      std::to_string(table.header.size()));
    std::vector<double> row(fields.size());
    for (std::size_t j = 0; j < fields.size(); ++j) {
      const auto v = parse_double(detail::unquote(fields[j]));
      if (!v || !std::isfinite(*v))
        throw DataError(source + ": row " + std::to_string(r) + ", column '" + table.header[j] +
                        "': cannot parse '" + std::string(fields[j]) + "'");
      row[j] = *v;
    }
    rows.push_back(std::move(row));
  }
  if (!have_header) throw DataError(source + ": missing header row");
  table.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(table.header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      table.values(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  return table;
}

inline CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return read_csv(in, path);
}

inline void write_csv(std::ostream& out, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  for (std::size_t j = 0; j < header.size(); ++j)
    out << (j ? "," : "") << detail::csv_escape(header[j]);
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t j = 0; j < row.size(); ++j) out << (j ? "," : "") << detail::csv_escape(row[j]);
    out << '\n';
  }
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << content;
  if (!out) throw DataError("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Datasets

/// Column of the variance design built from a named input column.
struct VarianceTerm {
  std::string column;
  std::string transform = "identity";  // identity, sqrt, log, square
};

inline Vector apply_transform(const Vector& v, const std::string& transform,
                              const std::string& column) {
  if (transform == "identity") return v;
  if (transform == "square") return v.array().square();
  if (transform == "sqrt") {
    if ((v.array() < 0.0).any()) throw DataError("sqrt of negative value in '" + column + "'");
    return v.array().sqrt();
  }
  if (transform == "log") {
    if ((v.array() <= 0.0).any()) throw DataError("log of non-positive value in '" + column + "'");
    return v.array().log();
  }
  throw DataError("unknown transform '" + transform + "'");
}

/// Builds the variance design from `terms` over the columns of `source`.
inline CsvTable build_variance_design(const CsvTable& source, const std::vector<VarianceTerm>& terms) {
  if (terms.empty()) return source;
  CsvTable out;
  out.values.resize(source.values.rows(), static_cast<Index>(terms.size()));
  for (std::size_t j = 0; j < terms.size(); ++j) {
    const Index col = source.column(terms[j].column);
    if (col < 0) throw DataError("variance term column '" + terms[j].column + "' not found");
    out.values.col(static_cast<Index>(j)) =
        apply_transform(source.values.col(col), terms[j].transform, terms[j].column);
    out.header.push_back(terms[j].transform == "identity"
                             ? terms[j].column
                             : terms[j].transform + "(" + terms[j].column + ")");
  }
  return out;
}

struct DatasetPaths {
  std::string y;
  std::string x;
  std::string v_mean;  // empty: intercept only
  std::string v_var;   // empty: same file as v_mean
};

struct LoadedDataset {
  ValidatedData validated;
  std::vector<std::string> x_names;
  std::vector<std::string> v_mean_names;
  std::vector<std::string> v_var_names;
};

namespace detail {

inline CsvTable empty_table(Index rows) { return CsvTable{{}, Matrix(rows, 0)}; }

}  // namespace detail

/// Reads and validates a dataset. v_var defaults to v_mean when its path is
/// empty.
inline LoadedDataset load_dataset(const DatasetPaths& paths,
                                  const std::vector<VarianceTerm>& variance_terms = {}) {
  const CsvTable y = read_csv_file(paths.y);
  if (y.values.cols() != 1) throw DataError(paths.y + ": expected exactly one column");
  const CsvTable x = read_csv_file(paths.x);
  const CsvTable vm =
      paths.v_mean.empty() ? detail::empty_table(y.values.rows()) : read_csv_file(paths.v_mean);
  const CsvTable vv_raw = paths.v_var.empty() ? vm : read_csv_file(paths.v_var);
  const CsvTable vv = build_variance_design(vv_raw, variance_terms);

  LoadedDataset out;
  out.validated = validate_dataset(y.values.col(0), x.values, vm.values, vv.values);
  out.x_names = x.header;
  out.v_mean_names = vm.header;
  out.v_var_names = vv.header;
  if (out.validated.mean_intercept_added)
    out.v_mean_names.insert(out.v_mean_names.begin(), "(intercept)");
  if (out.validated.var_intercept_added)
    out.v_var_names.insert(out.v_var_names.begin(), "(intercept)");
  return out;
}

// ---------------------------------------------------------------------------
// Configs

struct FitRequest {
  FitConfig fit;
  PriorConfig prior;
  std::optional<Index> screen;  // keep the m columns most correlated with y
  std::vector<VarianceTerm> variance_terms;
};

namespace detail {

inline double json_number(const Json& j, const std::string& key) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    if (auto v = parse_double(j.get<std::string>())) return *v;
  }
  throw DataError("config key '" + key + "' must be a number");
}

inline std::int64_t json_integer(const Json& j, const std::string& key) {
  if (j.is_number_integer()) return j.get<std::int64_t>();
  throw DataError("config key '" + key + "' must be an integer");
}

inline bool json_bool(const Json& j, const std::string& key) {
  if (j.is_boolean()) return j.get<bool>();
  throw DataError("config key '" + key + "' must be true or false");
}

inline Json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw DataError(source + ": " + e.what());
  }
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

/// Fit config: {"fit": {FitConfig fields}, "prior": {c, sigma_omega_inv},
/// "screen": m, "variance_terms": [{"column", "transform"}]}.
/// Unknown keys are rejected.
inline FitRequest parse_fit_config(const Json& j) {
  using detail::json_bool;
  using detail::json_integer;
  using detail::json_number;
  FitRequest req;
  if (!j.is_object()) throw DataError("fit config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "fit") {
      if (!value.is_object()) throw DataError("'fit' must be an object");
      for (const auto& [k, v] : value.items()) {
        if (k == "max_iterations") req.fit.max_iterations = static_cast<int>(json_integer(v, k));
        else if (k == "convergence_alpha") req.fit.convergence_alpha = json_number(v, k);
        else if (k == "eb_lambda") req.fit.eb_lambda = json_number(v, k);
        else if (k == "pi0_floor") req.fit.pi0_floor = json_number(v, k);
        else if (k == "homoscedastic") req.fit.homoscedastic = json_bool(v, k);
        else if (k == "monotone_inclusion") req.fit.monotone_inclusion = json_bool(v, k);
        else if (k == "seed") req.fit.seed = static_cast<std::uint64_t>(json_integer(v, k));
        else if (k == "threads") req.fit.threads = static_cast<int>(json_integer(v, k));
        else throw DataError("unknown fit config key '" + k + "'");
      }
    } else if (key == "prior") {
      if (!value.is_object()) throw DataError("'prior' must be an object");
      for (const auto& [k, v] : value.items()) {
        if (k == "c") req.prior.c = json_number(v, k);
        else if (k == "sigma_omega_inv") req.prior.sigma_omega_inv = json_number(v, k);
        else throw DataError("unknown prior config key '" + k + "'");
      }
    } else if (key == "screen") {
      const auto m = json_integer(value, key);
      if (m < 1) throw DataError("'screen' must be at least 1");
      req.screen = static_cast<Index>(m);
    } else if (key == "variance_terms") {
      if (!value.is_array()) throw DataError("'variance_terms' must be an array");
      for (const auto& term : value) {
        if (!term.is_object() || !term.contains("column") || !term["column"].is_string())
          throw DataError("each variance term needs a 'column' string");
        VarianceTerm t{term["column"].get<std::string>(), "identity"};
        if (term.contains("transform")) t.transform = term["transform"].get<std::string>();
        apply_transform(Vector::Ones(1), t.transform, t.column);
        req.variance_terms.push_back(std::move(t));
      }
    } else {
      throw DataError("unknown config key '" + key + "'");
    }
  }
  check_fit_config(req.fit);
  check_prior(req.prior);
  return req;
}

struct SimRequest {
  sim::SimConfig config;
  std::vector<sim::Method> methods{sim::Method::hprobe, sim::Method::probe};
};

/// Simulation config: flat object of SimConfig fields plus "methods".
inline SimRequest parse_sim_config(const Json& j) {
  using detail::json_bool;
  using detail::json_integer;
  using detail::json_number;
  if (!j.is_object()) throw DataError("simulation config must be a JSON object");
  SimRequest req;
  sim::SimConfig& c = req.config;
  for (const auto& [k, v] : j.items()) {
    if (k == "n") c.n = static_cast<int>(json_integer(v, k));
    else if (k == "p") c.p = static_cast<int>(json_integer(v, k));
    else if (k == "v") c.v = static_cast<int>(json_integer(v, k));
    else if (k == "seed") c.seed = static_cast<std::uint64_t>(json_integer(v, k));
    else if (k == "pi_true") c.pi_true = json_number(v, k);
    else if (k == "eta_beta") c.eta_beta = json_number(v, k);
    else if (k == "snr") c.snr = json_number(v, k);
    else if (k == "length_scale") c.length_scale = json_number(v, k);
    else if (k == "replicate_count") c.replicate_count = static_cast<int>(json_integer(v, k));
    else if (k == "homoscedastic_truth") c.homoscedastic_truth = json_bool(v, k);
    else if (k == "level") c.level = json_number(v, k);
    else if (k == "max_iterations") c.max_iterations = static_cast<int>(json_integer(v, k));
    else if (k == "threads") c.threads = static_cast<int>(json_integer(v, k));
    else if (k == "predictor_kind") {
      const std::string s = v.is_string() ? v.get<std::string>() : "";
      if (s == "binary") c.predictor_kind = sim::PredictorKind::binary;
      else if (s == "continuous") c.predictor_kind = sim::PredictorKind::continuous;
      else throw DataError("predictor_kind must be \"binary\" or \"continuous\"");
    } else if (k == "snr_definition") {
      const std::string s = v.is_string() ? v.get<std::string>() : "";
      if (s == "mean_variance") c.snr_definition = sim::SnrDefinition::mean_variance;
      else if (s == "mean_precision") c.snr_definition = sim::SnrDefinition::mean_precision;
      else throw DataError("snr_definition must be \"mean_variance\" or \"mean_precision\"");
    } else if (k == "methods") {
      if (!v.is_array() || v.empty()) throw DataError("'methods' must be a non-empty array");
      req.methods.clear();
      for (const auto& m : v) {
        const std::string s = m.is_string() ? m.get<std::string>() : "";
        if (s == "hprobe") req.methods.push_back(sim::Method::hprobe);
        else if (s == "probe") req.methods.push_back(sim::Method::probe);
        else throw DataError("unknown method '" + s + "'");
      }
    } else {
      throw DataError("unknown simulation config key '" + k + "'");
    }
  }
  sim::check_config(c);
  return req;
}

// ---------------------------------------------------------------------------
// Model files

/// A fitted model plus what is needed to rebuild designs for new data.
struct ModelFile {
  FitResult fit;
  std::vector<std::string> x_names;  // sparse design columns in model order
  std::vector<std::string> v_mean_names;
  std::vector<std::string> v_var_names;
  bool mean_intercept_added = false;
  bool var_intercept_added = false;
  std::optional<Standardization> standardization;
  std::vector<VarianceTerm> variance_terms;
};

namespace detail {

inline Json vector_json(const Vector& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(format_double(v(i)));
  return a;
}

inline Json matrix_json(const Matrix& m) {
  Json a = Json::array();
  for (Index i = 0; i < m.rows(); ++i) a.push_back(vector_json(m.row(i).transpose()));
  return a;
}

inline double number_from_json(const Json& j, const std::string& field) {
  if (!j.is_string()) throw DataError("model field '" + field + "' must hold decimal strings");
  const auto v = parse_double(j.get<std::string>());
  if (!v) throw DataError("model field '" + field + "': bad number '" + j.get<std::string>() + "'");
  return *v;
}

inline Vector vector_from_json(const Json& j, const std::string& field) {
  if (!j.is_array()) throw DataError("model field '" + field + "' must be an array");
  Vector v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = number_from_json(j[i], field);
  return v;
}

inline Matrix matrix_from_json(const Json& j, const std::string& field) {
  if (!j.is_array()) throw DataError("model field '" + field + "' must be an array of rows");
  const Index rows = static_cast<Index>(j.size());
  const Index cols = rows ? static_cast<Index>(j[0].size()) : 0;
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    const Vector r = vector_from_json(j[static_cast<std::size_t>(i)], field);
    if (r.size() != cols) throw DataError("model field '" + field + "' has ragged rows");
    m.row(i) = r.transpose();
  }
  return m;
}

inline const Json& require(const Json& j, const std::string& key) {
  if (!j.is_object() || !j.contains(key)) throw DataError("model file is missing '" + key + "'");
  return j.at(key);
}

}  // namespace detail

inline Json model_to_json(const ModelFile& model) {
  using detail::matrix_json;
  using detail::vector_json;
  const FitResult& f = model.fit;
  const FitState& s = f.state;
  Json state = {{"beta", vector_json(s.beta)},     {"s2", vector_json(s.s2)},
                {"p_incl", vector_json(s.p_incl)}, {"phi", vector_json(s.phi)},
                {"alpha0", format_double(s.alpha0)}, {"omega", vector_json(s.omega)},
                {"w0", vector_json(s.w0)},         {"w0_var", vector_json(s.w0_var)},
                {"t", s.t}};
  Json trace = Json::array();
  for (const auto& e : f.trace) trace.push_back({{"t", e.t}, {"cc", format_double(e.cc)}});
  Json terms = Json::array();
  for (const auto& t : model.variance_terms)
    terms.push_back({{"column", t.column}, {"transform", t.transform}});
  Json j = {{"format", "hprobe-model-1"},
            {"state", std::move(state)},
            {"psi", matrix_json(f.psi)},
            {"sigma2", vector_json(f.sigma2)},
            {"converged", f.converged},
            {"null_model", f.null_model},
            {"homoscedastic", f.homoscedastic},
            {"clamped_probabilities", f.clamped_probabilities},
            {"trace", std::move(trace)},
            {"x_names", model.x_names},
            {"v_mean_names", model.v_mean_names},
            {"v_var_names", model.v_var_names},
            {"mean_intercept_added", model.mean_intercept_added},
            {"var_intercept_added", model.var_intercept_added},
            {"variance_terms", std::move(terms)}};
  if (model.standardization)
    j["standardization"] = {{"center", vector_json(model.standardization->center)},
                            {"scale", vector_json(model.standardization->scale)}};
  else
    j["standardization"] = nullptr;
  return j;
}

inline ModelFile model_from_json(const Json& j) {
  using detail::matrix_from_json;
  using detail::number_from_json;
  using detail::require;
  using detail::vector_from_json;
  try {
    if (require(j, "format") != "hprobe-model-1") throw DataError("unsupported model format");
    ModelFile m;
    const Json& st = require(j, "state");
    FitState& s = m.fit.state;
    s.beta = vector_from_json(require(st, "beta"), "beta");
    s.s2 = vector_from_json(require(st, "s2"), "s2");
    s.p_incl = vector_from_json(require(st, "p_incl"), "p_incl");
    s.phi = vector_from_json(require(st, "phi"), "phi");
    s.alpha0 = number_from_json(require(st, "alpha0"), "alpha0");
    s.omega = vector_from_json(require(st, "omega"), "omega");
    s.w0 = vector_from_json(require(st, "w0"), "w0");
    s.w0_var = vector_from_json(require(st, "w0_var"), "w0_var");
    s.t = require(st, "t").get<int>();
    m.fit.psi = matrix_from_json(require(j, "psi"), "psi");
    m.fit.sigma2 = vector_from_json(require(j, "sigma2"), "sigma2");
    m.fit.converged = require(j, "converged").get<bool>();
    m.fit.null_model = require(j, "null_model").get<bool>();
    m.fit.homoscedastic = require(j, "homoscedastic").get<bool>();
    m.fit.clamped_probabilities = require(j, "clamped_probabilities").get<int>();
    for (const auto& e : require(j, "trace"))
      m.fit.trace.push_back({require(e, "t").get<int>(), number_from_json(require(e, "cc"), "cc")});
    m.x_names = require(j, "x_names").get<std::vector<std::string>>();
    m.v_mean_names = require(j, "v_mean_names").get<std::vector<std::string>>();
    m.v_var_names = require(j, "v_var_names").get<std::vector<std::string>>();
    m.mean_intercept_added = require(j, "mean_intercept_added").get<bool>();
    m.var_intercept_added = require(j, "var_intercept_added").get<bool>();
    for (const auto& t : require(j, "variance_terms"))
      m.variance_terms.push_back(
          {require(t, "column").get<std::string>(), require(t, "transform").get<std::string>()});
    const Json& sd = require(j, "standardization");
    if (!sd.is_null())
      m.standardization = Standardization{vector_from_json(require(sd, "center"), "center"),
                                          vector_from_json(require(sd, "scale"), "scale")};

    const Index p = s.beta.size();
    if (s.s2.size() != p || s.p_incl.size() != p || static_cast<Index>(m.x_names.size()) != p)
      throw DataError("model file: sparse coefficient lengths disagree");
    if (m.fit.psi.rows() != s.phi.size() + 1 || m.fit.psi.cols() != s.phi.size() + 1)
      throw DataError("model file: psi has the wrong shape");
    if (m.standardization &&
        (m.standardization->center.size() != p || m.standardization->scale.size() != p))
      throw DataError("model file: standardization length disagrees");
    return m;
  } catch (const Json::exception& e) {
    throw DataError(std::string("model file: ") + e.what());
  }
}

inline std::string serialize_model(const ModelFile& model) {
  return model_to_json(model).dump(2) + "\n";
}

inline ModelFile parse_model(const std::string& text) {
  return model_from_json(detail::parse_json_text(text, "model file"));
}

// ---------------------------------------------------------------------------
// Designs for new data

struct NewDesign {
  Matrix x;
  Matrix v_mean;
  Matrix v_var;
};

/// Rebuilds the model's designs from raw tables: selects and standardizes
/// the sparse columns by name, applies the variance terms and injects the
/// same intercepts as in training.
inline NewDesign build_design(const ModelFile& model, const CsvTable& x, const CsvTable& v_mean,
                              const CsvTable& v_var_raw) {
  const Index rows = x.values.rows();
  if (v_mean.values.rows() != rows || v_var_raw.values.rows() != rows)
    throw DataError("new-data files have different row counts");
  NewDesign d;
  d.x.resize(rows, static_cast<Index>(model.x_names.size()));
  for (std::size_t k = 0; k < model.x_names.size(); ++k) {
    const Index col = x.column(model.x_names[k]);
    if (col < 0) throw DataError("x column '" + model.x_names[k] + "' not found");
    d.x.col(static_cast<Index>(k)) = x.values.col(col);
  }
  if (model.standardization) d.x = model.standardization->apply(d.x);
  d.v_mean = model.mean_intercept_added ? hprobe::detail::prepend_ones(v_mean.values) : v_mean.values;
  if (!model.fit.homoscedastic) {
    const CsvTable vv = build_variance_design(v_var_raw, model.variance_terms);
    d.v_var = model.var_intercept_added ? hprobe::detail::prepend_ones(vv.values) : vv.values;
  }
  return d;
}

struct RawTables {
  CsvTable x, v_mean, v_var;
};

inline RawTables read_raw_tables(const std::string& x_path, const std::string& v_mean_path,
                                 const std::string& v_var_path) {
  RawTables t;
  t.x = read_csv_file(x_path);
  t.v_mean = v_mean_path.empty() ? detail::empty_table(t.x.values.rows()) : read_csv_file(v_mean_path);
  t.v_var = v_var_path.empty() ? t.v_mean : read_csv_file(v_var_path);
  return t;
}

// ---------------------------------------------------------------------------
// Command line

enum ExitCode { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

namespace detail {

/// `dir/stem.csv` -> `dir/stem<suffix>`.
inline std::string sibling_path(const std::string& path, const std::string& suffix) {
  std::filesystem::path p(path);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

struct FitArgs {
  DatasetPaths data;
  std::string config, out, summary;
  std::optional<int> threads;
  std::optional<std::uint64_t> seed;
  bool standardize = false;
};

inline int run_fit(const FitArgs& a, std::ostream& out) {
  FitRequest req;
  if (!a.config.empty()) req = parse_fit_config(parse_json_text(read_text_file(a.config), a.config));
  if (a.threads) req.fit.threads = *a.threads;
  if (a.seed) req.fit.seed = *a.seed;
  check_fit_config(req.fit);

  LoadedDataset loaded = load_dataset(a.data, req.variance_terms);
  DataSet data = loaded.validated.data;
  std::vector<std::string> names = loaded.x_names;
  if (req.screen) {
    const auto keep = marginal_screen(data, *req.screen);
    data = select_columns(data, keep);
    std::vector<std::string> kept;
    for (Index k : keep) kept.push_back(names[static_cast<std::size_t>(k)]);
    names = std::move(kept);
  }
  ModelFile model;
  if (a.standardize) {
    model.standardization = fit_standardization(data.x);
    data.x = model.standardization->apply(data.x);
  }
  model.fit = hprobe::fit(data, req.fit, req.prior);
  model.x_names = names;
  model.v_mean_names = loaded.v_mean_names;
  model.v_var_names = loaded.v_var_names;
  model.mean_intercept_added = loaded.validated.mean_intercept_added;
  model.var_intercept_added = loaded.validated.var_intercept_added;
  model.variance_terms = req.variance_terms;
  write_text_file(a.out, serialize_model(model));

  // Summary of selected predictors, p > 0.5.
  std::vector<std::vector<std::string>> rows;
  const FitState& st = model.fit.state;
  for (Index k = 0; k < st.beta.size(); ++k)
    if (st.p_incl(k) > 0.5)
      rows.push_back({std::to_string(k), model.x_names[static_cast<std::size_t>(k)],
                      format_double(st.beta(k)), format_double(st.p_incl(k))});
  const std::vector<std::string> header{"k", "name", "beta", "p_incl"};
  if (a.summary.empty()) {
    write_csv(out, header, rows);
  } else {
    std::ostringstream ss;
    write_csv(ss, header, rows);
    write_text_file(a.summary, ss.str());
  }
  if (!model.fit.converged)
    std::cerr << "warning: iteration limit reached before convergence\n";
  return kExitOk;
}

struct PredictArgs {
  std::string model, x, v_mean, v_var, out;
  double level = 0.95;
};

inline int run_predict(const PredictArgs& a, std::ostream& out) {
  const ModelFile model = parse_model(read_text_file(a.model));
  const RawTables raw = read_raw_tables(a.x, a.v_mean, a.v_var);
  const NewDesign d = build_design(model, raw.x, raw.v_mean, raw.v_var);
  const auto intervals = prediction_intervals(model.fit, d.x, d.v_mean, d.v_var, a.level);
  std::vector<std::vector<std::string>> rows;
  rows.reserve(intervals.size());
  for (const auto& pi : intervals)
    rows.push_back({format_double(pi.y_hat), format_double(pi.lower), format_double(pi.upper),
                    format_double(pi.sigma2_new), format_double(pi.var_parametric)});
  std::ostringstream ss;
  write_csv(ss, {"y_hat", "lower", "upper", "sigma2_new", "var_parametric"}, rows);
  if (a.out.empty()) out << ss.str();
  else write_text_file(a.out, ss.str());
  return kExitOk;
}

struct SimulateArgs {
  std::string config, out;
  std::optional<int> threads;
  std::optional<std::uint64_t> seed;
  std::optional<double> level;
};

/// Result table without wall-clock columns, so identical configs give
/// identical bytes.
inline std::string experiment_csv(const sim::ExperimentResult& res) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : res.rows) {
    const auto& m = r.metrics;
    rows.push_back({std::to_string(r.replicate), std::to_string(r.seed), sim::method_name(r.method),
                    format_double(m.rmse), format_double(m.mad), format_double(m.tpr),
                    format_double(m.fdr), format_double(m.ecp), format_double(m.mean_pi_length),
                    format_double(r.omega_bar), std::to_string(r.iterations),
                    r.converged ? "1" : "0", r.error});
  }
  std::ostringstream ss;
  write_csv(ss,
            {"replicate", "seed", "method", "rmse", "mad", "tpr", "fdr", "ecp", "mean_pi_length",
             "omega_bar", "iterations", "converged", "error"},
            rows);
  return ss.str();
}

inline int run_simulate(const SimulateArgs& a, std::ostream& out) {
  SimRequest req = parse_sim_config(parse_json_text(read_text_file(a.config), a.config));
  if (a.threads) req.config.threads = *a.threads;
  if (a.seed) req.config.seed = *a.seed;
  if (a.level) req.config.level = *a.level;
  sim::check_config(req.config);
  const sim::ExperimentResult res = sim::run_experiment(req.config, req.methods);

  const std::string table = experiment_csv(res);
  std::vector<std::vector<std::string>> seeds, timing;
  for (std::size_t i = 0; i < res.rows.size(); ++i) {
    const auto& r = res.rows[i];
    if (i % req.methods.size() == 0)
      seeds.push_back({std::to_string(r.replicate), std::to_string(r.seed)});
    timing.push_back({std::to_string(r.replicate), sim::method_name(r.method),
                      format_double(r.runtime_seconds)});
  }
  std::ostringstream seeds_csv, timing_csv;
  write_csv(seeds_csv, {"replicate", "seed"}, seeds);
  write_csv(timing_csv, {"replicate", "method", "runtime_seconds"}, timing);
  if (a.out.empty()) {
    out << table;
  } else {
    write_text_file(a.out, table);
    write_text_file(sibling_path(a.out, ".seeds.csv"), seeds_csv.str());
    write_text_file(sibling_path(a.out, ".timing.csv"), timing_csv.str());
  }
  return kExitOk;
}

struct DiagnoseArgs {
  std::string model, y, x, v_mean, v_var, candidate, out, report;
};

inline int run_diagnose(const DiagnoseArgs& a, std::ostream& out) {
  const ModelFile model = parse_model(read_text_file(a.model));
  const CsvTable y = read_csv_file(a.y);
  if (y.values.cols() != 1) throw DataError(a.y + ": expected exactly one column");
  const RawTables raw = read_raw_tables(a.x, a.v_mean, a.v_var);
  const NewDesign d = build_design(model, raw.x, raw.v_mean, raw.v_var);
  if (y.values.rows() != d.x.rows()) throw DataError("y and x have different row counts");
  if (model.fit.state.w0.size() != d.x.rows())
    throw DataError("diagnose needs the training rows the model was fitted on");

  // Candidate column, searched in the variance, mean and sparse inputs.
  Vector candidate;
  for (const CsvTable* t : {&raw.v_var, &raw.v_mean, &raw.x}) {
    const Index col = t->column(a.candidate);
    if (col >= 0) {
      candidate = t->values.col(col);
      break;
    }
  }
  if (candidate.size() == 0) throw DataError("candidate column '" + a.candidate + "' not found");

  DataSet data{y.values.col(0), d.x, d.v_mean,
               d.v_var.size() ? d.v_var : Matrix(Matrix::Ones(d.x.rows(), 1))};
  const Vector lsr = log_squared_residuals(model.fit, data);
  std::vector<std::vector<std::string>> rows;
  for (Index i = 0; i < lsr.size(); ++i)
    rows.push_back({format_double(candidate(i)), format_double(lsr(i))});
  std::ostringstream ss;
  write_csv(ss, {a.candidate, "log_squared_residual"}, rows);
  if (a.out.empty()) out << ss.str();
  else write_text_file(a.out, ss.str());

  const BrownForsytheResult bf = brown_forsythe(lsr, candidate_groups(candidate));
  std::ostringstream rep;
  rep << "brown_forsythe candidate=" << a.candidate << " groups=" << bf.groups
      << " df=" << bf.df_between << "," << bf.df_within
      << " statistic=" << format_double(bf.statistic)
      << " p_value=" << format_double(bf.p_value) << "\n";
  if (a.report.empty()) (a.out.empty() ? std::cerr : out) << rep.str();
  else write_text_file(a.report, rep.str());
  return kExitOk;
}

}  // namespace detail

/// Entry point of the `hprobe` executable. Returns 0 on success, 1 on usage
/// errors, 2 on data errors and 3 on numerical failures.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"Sparse regression with a modeled residual variance", "hprobe"};
  app.require_subcommand(1);

  detail::FitArgs fit_args;
  auto* fit_cmd = app.add_subcommand("fit", "Fit a model and write it as JSON");
  fit_cmd->add_option("--y", fit_args.data.y, "Outcome CSV (one column)")->required();
  fit_cmd->add_option("--x", fit_args.data.x, "Sparse-candidate predictors CSV")->required();
  fit_cmd->add_option("--v-mean", fit_args.data.v_mean, "Non-sparse mean predictors CSV");
  fit_cmd->add_option("--v-var", fit_args.data.v_var, "Variance predictors CSV (default: --v-mean)");
  fit_cmd->add_option("--config", fit_args.config, "Fit config JSON");
  fit_cmd->add_option("--out", fit_args.out, "Model JSON to write")->required();
  fit_cmd->add_option("--summary", fit_args.summary, "Selected-predictor CSV (default: stdout)");
  fit_cmd->add_option("--threads", fit_args.threads, "Worker threads")->check(CLI::PositiveNumber);
  fit_cmd->add_option("--seed", fit_args.seed, "Seed, overrides the config");
  fit_cmd->add_flag("--standardize", fit_args.standardize, "Center and scale x columns");

  detail::PredictArgs pred_args;
  auto* pred_cmd = app.add_subcommand("predict", "Prediction intervals for new rows");
  pred_cmd->add_option("--model", pred_args.model, "Model JSON")->required();
  pred_cmd->add_option("--x", pred_args.x, "Sparse-candidate predictors CSV")->required();
  pred_cmd->add_option("--v-mean", pred_args.v_mean, "Non-sparse mean predictors CSV");
  pred_cmd->add_option("--v-var", pred_args.v_var, "Variance predictors CSV (default: --v-mean)");
  pred_cmd->add_option("--level", pred_args.level, "Interval coverage level")
      ->capture_default_str();
  pred_cmd->add_option("--out", pred_args.out, "Output CSV (default: stdout)");

  detail::SimulateArgs sim_args;
  auto* sim_cmd = app.add_subcommand("simulate", "Run the simulation study");
  sim_cmd->add_option("--config", sim_args.config, "Simulation config JSON")->required();
  sim_cmd->add_option("--out", sim_args.out, "Result CSV (default: stdout)");
  sim_cmd->add_option("--threads", sim_args.threads, "Worker threads")->check(CLI::PositiveNumber);
  sim_cmd->add_option("--seed", sim_args.seed, "Master seed, overrides the config");
  sim_cmd->add_option("--level", sim_args.level, "Interval coverage level, overrides the config");

  detail::DiagnoseArgs diag_args;
  auto* diag_cmd = app.add_subcommand("diagnose", "Log-squared residuals against a candidate");
  diag_cmd->add_option("--model", diag_args.model, "Model JSON")->required();
  diag_cmd->add_option("--y", diag_args.y, "Outcome CSV used for the fit")->required();
  diag_cmd->add_option("--x", diag_args.x, "Sparse-candidate predictors CSV")->required();
  diag_cmd->add_option("--v-mean", diag_args.v_mean, "Non-sparse mean predictors CSV");
  diag_cmd->add_option("--v-var", diag_args.v_var, "Variance predictors CSV (default: --v-mean)");
  diag_cmd->add_option("--candidate", diag_args.candidate, "Column to test against")->required();
  diag_cmd->add_option("--out", diag_args.out, "Diagnostics CSV (default: stdout)");
  diag_cmd->add_option("--report", diag_args.report, "Brown-Forsythe report file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (app.exit(e, out, err) == 0) return kExitOk;
    err << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*fit_cmd) return detail::run_fit(fit_args, out);
    if (*pred_cmd) return detail::run_predict(pred_args, out);
    if (*sim_cmd) return detail::run_simulate(sim_args, out);
    if (*diag_cmd) return detail::run_diagnose(diag_args, out);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const Json::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace hprobe::io
