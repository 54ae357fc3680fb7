#pragma once

#include <json.hpp>

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <pinn/losses.hpp>
#include <pinn/ode.hpp>
#include <pinn/spline.hpp>
#include <pinn/trainer.hpp>

namespace pinn {

// Configuration problem tied to a specific field, reported as a JSON-pointer
// style path so callers can say exactly which entry to fix.
struct ConfigError : std::runtime_error {
  std::string field;
  ConfigError(std::string field_path, const std::string& message)
      : std::runtime_error("config error at " + field_path + ": " + message),
        field(std::move(field_path)) {}
};

// Ground-truth s_MT(t) specification used by the forward simulator.
struct SmtSpec {
  enum class Kind { Constant, Sigmoid, PiecewiseLinear };
  Kind kind = Kind::Sigmoid;
  double value = 0.04;                    // constant
  double before = 0.04, after = 0.01;     // sigmoid plateaus
  double mid = 15.0, width = 1.0;         // sigmoid center / steepness
  std::vector<double> days, values;       // piecewise-linear table

  SmtCurve to_curve() const {
    switch (kind) {
      case Kind::Constant: return SmtCurve::constant(value);
      case Kind::Sigmoid: return SmtCurve::sigmoid(before, after, mid, width);
      case Kind::PiecewiseLinear: return SmtCurve::piecewise_linear(days, values);
    }
    throw std::logic_error("unreachable s_MT kind");
  }
};

// One known proportion triple (C, T, M fractions of total volume) at a day.
struct AnchorConstraint {
  double day = 0.0;
  std::array<double, 3> q{};
};

// Forward-simulation block: everything the oracle needs beyond the shared
// schedule/constants.
struct SimulateSpec {
  SystemState initial{4.99435, 0.09, 0.00565, 0.0};  // volumes at t0, mm^3 (G in mg)
  SmtSpec s_mt;
  std::vector<double> sample_days = {6, 9, 13, 16, 20, 23};
  double noise = 0.0;          // multiplicative observation noise level
  std::uint64_t noise_seed = 1;
  double solver_step = 0.005;  // RK4 step, days
};

// The one configuration file shared by the simulate and fit front-ends.
struct RunConfig {
  std::string data_path = "observations.csv";
  double t0 = 6.0;
  double t_final = 23.0;
  AnchorConstraint initial_proportions{6.0, {0.99887, 0.0, 0.00113}};
  // The day-23 triple is renormalized (its five-decimal source values sum to
  // 0.99999) so the proportions sum to one at full precision.
  std::vector<AnchorConstraint> histology = {
      {17.0, {0.95755, 0.01818, 0.02427}},
      {23.0, {0.95665 / 0.99999, 0.00078 / 0.99999, 0.04256 / 0.99999}}};
  DosingSchedule schedule;
  RateSpec rates;  // values + trainable flags for the ten constant rates
  std::vector<int> u_hidden = {100, 100, 100};
  std::vector<int> lambda_hidden = {200, 200};
  int m_interp = 100;
  int epochs = 20000;
  double learning_rate = 1e-3;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::string output_dir = "results";
  double gem_scale = 0.5;
  double lambda_scale = 0.05;
  bool bc_mean = false;  // divide L_bc by the number of histology anchors
  SimulateSpec simulate;

  RunConfig() {
    schedule.injections.push_back({Agent::GEM, 10.0, 0.5, 0.25});
    schedule.injections.push_back({Agent::OT1, 14.0, 20.0, 0.25});
    ParamSet defaults;
    defaults.p_C = 0.3;  defaults.k_TC = 0.05; defaults.k_GC = 0.02;
    defaults.n_T = 0.1;  defaults.s_CT = 0.01; defaults.k_GT = 0.01;
    defaults.r_M = 0.05; defaults.k_GM = 0.6;  defaults.d_M = 0.2;
    defaults.d_G = 0.5;  defaults.s_MT = 0.0;  // surrogate-owned, not a constant
    rates = RateSpec::pinned(defaults);
  }

  void validate() const;
  nlohmann::json canonical() const;
  std::uint64_t hash() const;

  TrainOptions to_train_options() const {
    TrainOptions o = default_train_options();
    o.u_cfg.hidden = u_hidden;
    o.lam_cfg.hidden = lambda_hidden;
    o.rates = rates;
    o.schedule = schedule;
    o.m_interp = m_interp;
    o.epochs = epochs;
    o.adam.lr = learning_rate;
    o.gem_scale = gem_scale;
    o.lambda_scale = lambda_scale;
    o.bc_mean = bc_mean;
    return o;
  }

  // Anchor constraints attached to a parsed day/total series.
  void attach_anchors(ObservationSet& obs) const {
    obs.initial = Anchor{initial_proportions.day, initial_proportions.q};
    obs.histology.clear();
    for (const AnchorConstraint& h : histology)
      obs.histology.push_back(Anchor{h.day, h.q});
  }
};

namespace detail {

inline std::string json_type_name(const nlohmann::json& j) {
  return std::string(j.type_name());
}

inline const nlohmann::json& member(const nlohmann::json& j, const std::string& path,
                                    const std::string& key) {
  const auto it = j.find(key);
  if (it == j.end()) throw ConfigError(path + "/" + key, "missing required field");
  return *it;
}

template <typename T>
T as(const nlohmann::json& j, const std::string& path) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path, "unexpected type " + json_type_name(j));
  }
}

template <typename T>
T field(const nlohmann::json& j, const std::string& path, const std::string& key) {
  return as<T>(member(j, path, key), path + "/" + key);
}

template <typename T>
T field_or(const nlohmann::json& j, const std::string& path, const std::string& key,
           T fallback) {
  const auto it = j.find(key);
  if (it == j.end()) return fallback;
  return as<T>(*it, path + "/" + key);
}

inline std::array<double, 3> triple(const nlohmann::json& j, const std::string& path) {
  const auto v = as<std::vector<double>>(j, path);
  if (v.size() != 3)
    throw ConfigError(path, "expected 3 proportions, got " + std::to_string(v.size()));
  return {v[0], v[1], v[2]};
}

inline AnchorConstraint anchor(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected an object with day and q");
  AnchorConstraint a;
  a.day = field<double>(j, path, "day");
  a.q = triple(member(j, path, "q"), path + "/q");
  return a;
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

inline SmtSpec parse_smt_spec(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected an object with a kind field");
  SmtSpec s;
  const std::string kind = detail::field<std::string>(j, path, "kind");
  if (kind == "constant") {
    s.kind = SmtSpec::Kind::Constant;
    s.value = detail::field<double>(j, path, "value");
  } else if (kind == "sigmoid") {
    s.kind = SmtSpec::Kind::Sigmoid;
    s.before = detail::field<double>(j, path, "before");
    s.after = detail::field<double>(j, path, "after");
    s.mid = detail::field<double>(j, path, "mid");
    s.width = detail::field<double>(j, path, "width");
    if (!(s.width > 0.0)) throw ConfigError(path + "/width", "must be positive");
  } else if (kind == "piecewise_linear") {
    s.kind = SmtSpec::Kind::PiecewiseLinear;
    s.days = detail::field<std::vector<double>>(j, path, "days");
    s.values = detail::field<std::vector<double>>(j, path, "values");
    if (s.days.size() != s.values.size() || s.days.size() < 2)
      throw ConfigError(path, "days and values need equal length >= 2");
    for (std::size_t i = 1; i < s.days.size(); ++i)
      if (!(s.days[i] > s.days[i - 1]))
        throw ConfigError(path + "/days", "must be strictly increasing");
  } else {
    throw ConfigError(path + "/kind",
                      "unknown kind '" + kind +
                          "' (expected constant, sigmoid, or piecewise_linear)");
  }
  return s;
}

inline nlohmann::json smt_spec_json(const SmtSpec& s) {
  switch (s.kind) {
    case SmtSpec::Kind::Constant:
      return {{"kind", "constant"}, {"value", s.value}};
    case SmtSpec::Kind::Sigmoid:
      return {{"kind", "sigmoid"}, {"before", s.before}, {"after", s.after},
              {"mid", s.mid},      {"width", s.width}};
    case SmtSpec::Kind::PiecewiseLinear:
      return {{"kind", "piecewise_linear"}, {"days", s.days}, {"values", s.values}};
  }
  throw std::logic_error("unreachable s_MT kind");
}

inline RunConfig parse_config(const nlohmann::json& root) {
  if (!root.is_object()) throw ConfigError("/", "top level must be an object");
  RunConfig c;
  using detail::field;
  using detail::field_or;
  using detail::member;

  c.data_path = field_or<std::string>(root, "", "data", c.data_path);
  if (const auto it = root.find("window"); it != root.end()) {
    c.t0 = field<double>(*it, "/window", "t0");
    c.t_final = field<double>(*it, "/window", "t_final");
  }
  if (const auto it = root.find("initial_proportions"); it != root.end())
    c.initial_proportions = detail::anchor(*it, "/initial_proportions");
  if (const auto it = root.find("histology"); it != root.end()) {
    if (!it->is_array()) throw ConfigError("/histology", "expected an array");
    c.histology.clear();
    for (std::size_t i = 0; i < it->size(); ++i)
      c.histology.push_back(
          detail::anchor((*it)[i], "/histology/" + std::to_string(i)));
  }
  if (const auto it = root.find("dosing"); it != root.end()) {
    if (!it->is_array()) throw ConfigError("/dosing", "expected an array");
    c.schedule.injections.clear();
    for (std::size_t i = 0; i < it->size(); ++i) {
      const std::string path = "/dosing/" + std::to_string(i);
      const nlohmann::json& inj = (*it)[i];
      if (!inj.is_object()) throw ConfigError(path, "expected an object");
      Injection parsed;
      const std::string agent = field<std::string>(inj, path, "agent");
      if (agent == "GEM")
        parsed.agent = Agent::GEM;
      else if (agent == "OT1")
        parsed.agent = Agent::OT1;
      else
        throw ConfigError(path + "/agent", "unknown agent '" + agent + "'");
      parsed.day = field<double>(inj, path, "day");
      parsed.dose = field<double>(inj, path, "dose");
      parsed.sigma = field_or<double>(inj, path, "sigma", 0.25);
      c.schedule.injections.push_back(parsed);
    }
  }
  if (const auto it = root.find("constants"); it != root.end()) {
    if (!it->is_object()) throw ConfigError("/constants", "expected an object");
    for (std::size_t r = 0; r < kRateCount; ++r) {
      const std::string name = kRateNames[r];
      const auto entry = it->find(name);
      if (entry == it->end()) continue;
      const std::string path = "/constants/" + name;
      if (!entry->is_object()) throw ConfigError(path, "expected an object");
      c.rates.value[r] = field<double>(*entry, path, "value");
      c.rates.trainable[r] = field_or<bool>(*entry, path, "trainable", false);
    }
    for (const auto& [key, unused] : it->items()) {
      bool known = false;
      for (std::size_t r = 0; r < kRateCount; ++r)
        if (key == kRateNames[r]) known = true;
      if (!known)
        throw ConfigError("/constants/" + key, "unknown rate constant");
    }
  }
  if (const auto it = root.find("network"); it != root.end()) {
    c.u_hidden = field_or<std::vector<int>>(*it, "/network", "u_hidden", c.u_hidden);
    c.lambda_hidden =
        field_or<std::vector<int>>(*it, "/network", "lambda_hidden", c.lambda_hidden);
  }
  c.m_interp = field_or<int>(root, "", "m_interp", c.m_interp);
  c.epochs = field_or<int>(root, "", "epochs", c.epochs);
  c.learning_rate = field_or<double>(root, "", "learning_rate", c.learning_rate);
  c.seeds = field_or<std::vector<std::uint64_t>>(root, "", "seeds", c.seeds);
  c.output_dir = field_or<std::string>(root, "", "output_dir", c.output_dir);
  if (const auto it = root.find("scales"); it != root.end()) {
    c.gem_scale = field_or<double>(*it, "/scales", "gem", c.gem_scale);
    c.lambda_scale = field_or<double>(*it, "/scales", "lambda", c.lambda_scale);
  }
  c.bc_mean = field_or<bool>(root, "", "bc_mean", c.bc_mean);
  if (const auto it = root.find("simulate"); it != root.end()) {
    const std::string path = "/simulate";
    if (!it->is_object()) throw ConfigError(path, "expected an object");
    if (const auto iv = it->find("initial_volumes"); iv != it->end()) {
      c.simulate.initial.C = field<double>(*iv, path + "/initial_volumes", "C");
      c.simulate.initial.T = field<double>(*iv, path + "/initial_volumes", "T");
      c.simulate.initial.M = field<double>(*iv, path + "/initial_volumes", "M");
      c.simulate.initial.G =
          field_or<double>(*iv, path + "/initial_volumes", "G", 0.0);
    }
    if (const auto sm = it->find("s_mt"); sm != it->end())
      c.simulate.s_mt = parse_smt_spec(*sm, path + "/s_mt");
    c.simulate.sample_days = field_or<std::vector<double>>(*it, path, "sample_days",
                                                           c.simulate.sample_days);
    c.simulate.noise = field_or<double>(*it, path, "noise", c.simulate.noise);
    c.simulate.noise_seed =
        field_or<std::uint64_t>(*it, path, "noise_seed", c.simulate.noise_seed);
    c.simulate.solver_step =
        field_or<double>(*it, path, "solver_step", c.simulate.solver_step);
  }
  c.validate();
  return c;
}

inline void RunConfig::validate() const {
  if (!(t_final > t0)) throw ConfigError("/window/t_final", "must exceed t0");
  auto check_prop = [](const AnchorConstraint& a, const std::string& path) {
    double sum = 0.0;
    for (double qi : a.q) {
      if (!(qi >= 0.0) || !(qi <= 1.0))
        throw ConfigError(path + "/q", "proportions must lie in [0,1]");
      sum += qi;
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw ConfigError(path + "/q",
                        "proportions sum to " + std::to_string(sum) + ", expected 1");
  };
  check_prop(initial_proportions, "/initial_proportions");
  if (initial_proportions.day < t0 || initial_proportions.day > t_final)
    throw ConfigError("/initial_proportions/day", "outside the time window");
  for (std::size_t i = 0; i < histology.size(); ++i) {
    const std::string path = "/histology/" + std::to_string(i);
    check_prop(histology[i], path);
    if (histology[i].day < t0 || histology[i].day > t_final)
      throw ConfigError(path + "/day", "outside the time window");
  }
  for (std::size_t i = 0; i < schedule.injections.size(); ++i) {
    const Injection& inj = schedule.injections[i];
    const std::string path = "/dosing/" + std::to_string(i);
    if (inj.day < t0 || inj.day > t_final)
      throw ConfigError(path + "/day", "outside the time window");
    if (!(inj.dose > 0.0)) throw ConfigError(path + "/dose", "must be positive");
    if (!(inj.sigma > 0.0)) throw ConfigError(path + "/sigma", "must be positive");
  }
  for (std::size_t r = 0; r < kRateCount; ++r)
    if (!(rates.value[r] >= 0.0))
      throw ConfigError("/constants/" + std::string(kRateNames[r]) + "/value",
                        "must be non-negative");
  for (std::size_t i = 0; i < u_hidden.size(); ++i)
    if (u_hidden[i] <= 0)
      throw ConfigError("/network/u_hidden/" + std::to_string(i), "must be positive");
  for (std::size_t i = 0; i < lambda_hidden.size(); ++i)
    if (lambda_hidden[i] <= 0)
      throw ConfigError("/network/lambda_hidden/" + std::to_string(i),
                        "must be positive");
  if (u_hidden.empty()) throw ConfigError("/network/u_hidden", "needs >= 1 layer");
  if (lambda_hidden.empty())
    throw ConfigError("/network/lambda_hidden", "needs >= 1 layer");
  if (m_interp < 0) throw ConfigError("/m_interp", "must be non-negative");
  if (epochs < 0) throw ConfigError("/epochs", "must be non-negative");
  if (!(learning_rate > 0.0)) throw ConfigError("/learning_rate", "must be positive");
  if (seeds.empty()) throw ConfigError("/seeds", "need at least one seed");
  if (output_dir.empty()) throw ConfigError("/output_dir", "must not be empty");
  if (!(gem_scale > 0.0)) throw ConfigError("/scales/gem", "must be positive");
  if (!(lambda_scale > 0.0)) throw ConfigError("/scales/lambda", "must be positive");
  if (!(simulate.solver_step > 0.0))
    throw ConfigError("/simulate/solver_step", "must be positive");
  if (!(simulate.noise >= 0.0)) throw ConfigError("/simulate/noise", "must be >= 0");
  if (!(simulate.initial.C >= 0.0) || !(simulate.initial.T >= 0.0) ||
      !(simulate.initial.M >= 0.0) || !(simulate.initial.G >= 0.0))
    throw ConfigError("/simulate/initial_volumes", "volumes must be non-negative");
  if (simulate.sample_days.size() < 2)
    throw ConfigError("/simulate/sample_days", "need >= 2 sample days");
  for (std::size_t i = 0; i < simulate.sample_days.size(); ++i) {
    const double d = simulate.sample_days[i];
    if (d < t0 || d > t_final)
      throw ConfigError("/simulate/sample_days/" + std::to_string(i),
                        "outside the time window");
    if (i > 0 && !(d > simulate.sample_days[i - 1]))
      throw ConfigError("/simulate/sample_days/" + std::to_string(i),
                        "must be strictly increasing");
  }
}

// Canonical form: every effective field materialized, keys sorted by the JSON
// library's object ordering. Hashing this makes the hash independent of the
// field order (and formatting) of the file the config came from.
inline nlohmann::json RunConfig::canonical() const {
  nlohmann::json j;
  j["data"] = data_path;
  j["window"] = {{"t0", t0}, {"t_final", t_final}};
  j["initial_proportions"] = {{"day", initial_proportions.day},
                              {"q", initial_proportions.q}};
  nlohmann::json hist = nlohmann::json::array();
  for (const AnchorConstraint& h : histology)
    hist.push_back({{"day", h.day}, {"q", h.q}});
  j["histology"] = hist;
  nlohmann::json dosing = nlohmann::json::array();
  for (const Injection& inj : schedule.injections)
    dosing.push_back({{"agent", inj.agent == Agent::GEM ? "GEM" : "OT1"},
                      {"day", inj.day},
                      {"dose", inj.dose},
                      {"sigma", inj.sigma}});
  j["dosing"] = dosing;
  nlohmann::json constants;
  for (std::size_t r = 0; r < kRateCount; ++r)
    constants[kRateNames[r]] = {{"value", rates.value[r]},
                                {"trainable", rates.trainable[r]}};
  j["constants"] = constants;
  j["network"] = {{"u_hidden", u_hidden}, {"lambda_hidden", lambda_hidden}};
  j["m_interp"] = m_interp;
  j["epochs"] = epochs;
  j["learning_rate"] = learning_rate;
  j["seeds"] = seeds;
  j["output_dir"] = output_dir;
  j["scales"] = {{"gem", gem_scale}, {"lambda", lambda_scale}};
  j["bc_mean"] = bc_mean;
  j["simulate"] = {{"initial_volumes",
                    {{"C", simulate.initial.C},
                     {"T", simulate.initial.T},
                     {"M", simulate.initial.M},
                     {"G", simulate.initial.G}}},
                   {"s_mt", smt_spec_json(simulate.s_mt)},
                   {"sample_days", simulate.sample_days},
                   {"noise", simulate.noise},
                   {"noise_seed", simulate.noise_seed},
                   {"solver_step", simulate.solver_step}};
  return j;
}

inline std::uint64_t RunConfig::hash() const {
  return detail::fnv1a64(canonical().dump());
}

inline RunConfig parse_config_text(const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("/", std::string("not valid JSON: ") + e.what());
  }
  return parse_config(root);
}

}  // namespace pinn
