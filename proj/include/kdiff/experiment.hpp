#pragma once

// Experiment orchestration behind the kdiff-lab tool: config parsing,
// the four subcommands, and CSV/JSON emission.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "kdiff/analytic.hpp"
#include "kdiff/geometry.hpp"
#include "kdiff/kdiff.hpp"
#include "kdiff/lindyn.hpp"
#include "kdiff/sampler.hpp"
#include "kdiff/schedule.hpp"

namespace kdiff::experiment {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct DataConfig {
  int D = 16;
  int d = 4;
  std::optional<std::uint64_t> seed;  // falls back to the global seed
  std::vector<double> spectrum;       // non-empty selects colored data
  bool colored() const { return !spectrum.empty(); }
};

struct TheoryConfig {
  int k_grid = 101;
  int quad_nodes = kDefaultQuadNodes;
};

struct DynamicsConfig {
  FlowConfig flow;
  bool random_init = false;
  double tolerance = 1e-6;
  std::optional<double> phi_shift;  // re-run with phi + shift and compare W_perp
};

struct TrainSection {
  TrainConfig config;
  bool two_layer = false;
  int hidden = 32;
  bool binned = false;
  int bins = 128;
  double tolerance = 0.03;
  int log_every = 1;
};

struct SampleSection {
  enum class Net { Oracle, OptimalLinear, Trained };
  Net net = Net::OptimalLinear;
  std::int64_t n_samples = 1000;
  SampleRun run;
  std::optional<double> k;  // optimal_linear only; defaults to the theory optimum
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  fs::path output_dir = "kdiff-out";
  DataConfig data;
  ProcessSpec process = ProcessSpec::flow_matching();
  TargetSpec target = TargetSpec::k_target(1.0);
  LossTargetSpec loss = LossTargetSpec::u_loss();
  TimeMeasure measure = TimeMeasure::uniform();
  TheoryConfig theory;
  DynamicsConfig dynamics;
  TrainSection train;
  SampleSection sample;

  std::uint64_t data_seed() const { return data.seed.value_or(seed); }
  int ambient_dim() const { return data.colored() ? static_cast<int>(data.spectrum.size()) : data.D; }
};

namespace detail {

inline void reject_unknown(const json& obj, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError("section '" + section + "' must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items())
    if (!ok.count(key)) throw ConfigError("unknown key '" + key + "' in section '" + section + "'");
}

template <typename T>
T get(const json& obj, const char* key, T fallback, const std::string& section) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + section + "." + key + "'");
  }
}

inline std::string get_kind(const json& obj, const std::string& section) {
  if (obj.is_string()) return obj.get<std::string>();
  if (obj.is_object() && obj.contains("kind") && obj.at("kind").is_string()) return obj.at("kind").get<std::string>();
  throw ConfigError("section '" + section + "' needs a 'kind'");
}

inline TargetSpec parse_target(const json& j) {
  const std::string kind = get_kind(j, "target");
  if (j.is_object()) reject_unknown(j, "target", {"kind", "k"});
  if (kind == "epsilon") return TargetSpec::epsilon();
  if (kind == "x") return TargetSpec::x();
  if (kind == "v") return TargetSpec::v();
  if (kind == "k") {
    if (!j.is_object() || !j.contains("k")) throw ConfigError("target kind 'k' needs a value 'k'");
    return TargetSpec::k_target(get<double>(j, "k", 0.0, "target"));
  }
  throw ConfigError("unknown target kind '" + kind + "'");
}

inline LossTargetSpec parse_loss(const json& j) {
  const std::string kind = get_kind(j, "loss");
  if (j.is_object()) reject_unknown(j, "loss", {"kind"});
  if (kind == "u") return LossTargetSpec::u_loss();
  if (kind == "x") return LossTargetSpec::x_loss();
  if (kind == "eps") return LossTargetSpec::eps_loss();
  if (kind == "v") return LossTargetSpec::v_loss();
  throw ConfigError("unknown loss kind '" + kind + "'");
}

inline TimeMeasure parse_measure(const json& sampler, const json& interval) {
  double lo = 0.0, hi = 1.0;
  if (!interval.is_null()) {
    if (!interval.is_array() || interval.size() != 2) throw ConfigError("'interval' must be [lo, hi]");
    lo = interval[0].get<double>();
    hi = interval[1].get<double>();
  }
  if (sampler.is_null()) return TimeMeasure::uniform(lo, hi);
  const std::string kind = get_kind(sampler, "time_sampler");
  if (kind == "uniform") {
    if (sampler.is_object()) reject_unknown(sampler, "time_sampler", {"kind"});
    return TimeMeasure::uniform(lo, hi);
  }
  if (kind == "logit_normal") {
    reject_unknown(sampler, "time_sampler", {"kind", "mu", "sigma"});
    return TimeMeasure::logit_normal(get<double>(sampler, "mu", 0.0, "time_sampler"),
                                     get<double>(sampler, "sigma", 1.0, "time_sampler"), lo, hi);
  }
  throw ConfigError("unknown time sampler '" + kind + "'");
}

inline OptimizerConfig parse_optimizer(const json& j) {
  const std::string kind = get_kind(j, "train.optimizer");
  if (j.is_object()) reject_unknown(j, "train.optimizer", {"kind", "lr", "beta1", "beta2", "eps"});
  const json obj = j.is_object() ? j : json::object();
  const double lr = get<double>(obj, "lr", 1e-2, "train.optimizer");
  if (kind == "sgd") return OptimizerConfig::sgd(lr);
  if (kind == "adam")
    return OptimizerConfig::adam(lr, get<double>(obj, "beta1", 0.9, "train.optimizer"),
                                 get<double>(obj, "beta2", 0.95, "train.optimizer"),
                                 get<double>(obj, "eps", 1e-8, "train.optimizer"));
  throw ConfigError("unknown optimizer '" + kind + "'");
}

}  // namespace detail

/// Parse and validate a config document. Unknown keys anywhere are errors.
inline ExperimentConfig parse_config(const json& root) {
  using namespace detail;
  reject_unknown(root, "<root>",
                 {"seed", "output_dir", "data", "process", "target", "loss", "time_sampler", "interval", "theory",
                  "dynamics", "train", "sample"});
  ExperimentConfig cfg;
  cfg.seed = get<std::uint64_t>(root, "seed", 0, "<root>");
  cfg.output_dir = get<std::string>(root, "output_dir", cfg.output_dir.string(), "<root>");

  if (root.contains("data")) {
    const json& d = root.at("data");
    reject_unknown(d, "data", {"D", "d", "seed", "spectrum"});
    cfg.data.D = get<int>(d, "D", cfg.data.D, "data");
    cfg.data.d = get<int>(d, "d", cfg.data.d, "data");
    if (d.contains("seed")) cfg.data.seed = get<std::uint64_t>(d, "seed", 0, "data");
    cfg.data.spectrum = get<std::vector<double>>(d, "spectrum", {}, "data");
    if (cfg.data.colored() && d.contains("D") && cfg.data.D != static_cast<int>(cfg.data.spectrum.size()))
      throw ConfigError("data.D does not match the spectrum length");
  }
  if (!cfg.data.colored()) DimensionPair(cfg.data.D, cfg.data.d);

  if (root.contains("process")) {
    const std::string kind = get_kind(root.at("process"), "process");
    if (root.at("process").is_object()) reject_unknown(root.at("process"), "process", {"kind"});
    if (kind != "flow_matching") throw ConfigError("unknown process '" + kind + "'");
  }
  if (root.contains("target")) cfg.target = parse_target(root.at("target"));
  if (root.contains("loss")) cfg.loss = parse_loss(root.at("loss"));
  cfg.measure = parse_measure(root.value("time_sampler", json()), root.value("interval", json()));

  if (root.contains("theory")) {
    const json& t = root.at("theory");
    reject_unknown(t, "theory", {"k_grid", "quad_nodes"});
    cfg.theory.k_grid = get<int>(t, "k_grid", cfg.theory.k_grid, "theory");
    cfg.theory.quad_nodes = get<int>(t, "quad_nodes", cfg.theory.quad_nodes, "theory");
    if (cfg.theory.k_grid < 2) throw ConfigError("theory.k_grid must be >= 2");
    if (cfg.theory.quad_nodes < 2) throw ConfigError("theory.quad_nodes must be >= 2");
  }

  if (root.contains("dynamics")) {
    const json& y = root.at("dynamics");
    reject_unknown(y, "dynamics", {"step_size", "steps", "mode", "batch", "init", "tolerance", "phi_shift"});
    auto& flow = cfg.dynamics.flow;
    flow.step_size = get<double>(y, "step_size", flow.step_size, "dynamics");
    flow.steps = get<int>(y, "steps", flow.steps, "dynamics");
    flow.batch = get<int>(y, "batch", flow.batch, "dynamics");
    const std::string mode = get<std::string>(y, "mode", "exact", "dynamics");
    if (mode != "exact" && mode != "stochastic") throw ConfigError("dynamics.mode must be 'exact' or 'stochastic'");
    flow.mode = mode == "exact" ? FlowConfig::Mode::Exact : FlowConfig::Mode::Stochastic;
    const std::string init = get<std::string>(y, "init", "zero", "dynamics");
    if (init != "zero" && init != "random") throw ConfigError("dynamics.init must be 'zero' or 'random'");
    cfg.dynamics.random_init = init == "random";
    cfg.dynamics.tolerance = get<double>(y, "tolerance", cfg.dynamics.tolerance, "dynamics");
    if (y.contains("phi_shift")) cfg.dynamics.phi_shift = get<double>(y, "phi_shift", 0.0, "dynamics");
    try {
      flow.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
  }

  if (root.contains("train")) {
    const json& r = root.at("train");
    reject_unknown(r, "train",
                   {"loss_mode", "optimizer", "batch", "steps", "clamp_floor", "k_trainable", "k_init", "k_mode",
                    "bins", "net", "hidden", "stop_grad_target", "cosine_decay", "tolerance", "log_every"});
    auto& s = cfg.train;
    auto& c = s.config;
    const std::string loss_mode = get<std::string>(r, "loss_mode", "u", "train");
    if (loss_mode != "u" && loss_mode != "v_alg1") throw ConfigError("train.loss_mode must be 'u' or 'v_alg1'");
    c.loss_mode = loss_mode == "u" ? LossMode::ULoss : LossMode::VLossAlg1;
    if (r.contains("optimizer")) c.optimizer = parse_optimizer(r.at("optimizer"));
    c.batch = get<int>(r, "batch", c.batch, "train");
    c.steps = get<int>(r, "steps", c.steps, "train");
    c.clamp_floor = get<double>(r, "clamp_floor", c.clamp_floor, "train");
    c.k_trainable = get<bool>(r, "k_trainable", c.k_trainable, "train");
    c.k_init = get<double>(r, "k_init", c.k_init, "train");
    c.stop_grad_target = get<bool>(r, "stop_grad_target", c.stop_grad_target, "train");
    c.cosine_decay = get<bool>(r, "cosine_decay", c.cosine_decay, "train");
    const std::string k_mode = get<std::string>(r, "k_mode", "constant", "train");
    if (k_mode != "constant" && k_mode != "binned") throw ConfigError("train.k_mode must be 'constant' or 'binned'");
    s.binned = k_mode == "binned";
    s.bins = get<int>(r, "bins", s.bins, "train");
    const std::string net = get<std::string>(r, "net", "pure_linear", "train");
    if (net != "pure_linear" && net != "two_layer") throw ConfigError("train.net must be 'pure_linear' or 'two_layer'");
    s.two_layer = net == "two_layer";
    s.hidden = get<int>(r, "hidden", s.hidden, "train");
    s.tolerance = get<double>(r, "tolerance", s.tolerance, "train");
    s.log_every = get<int>(r, "log_every", s.log_every, "train");
    if (s.log_every < 1) throw ConfigError("train.log_every must be >= 1");
    if (s.bins < 1) throw ConfigError("train.bins must be >= 1");
  }
  cfg.train.config.time_sampler = cfg.measure;
  try {
    cfg.train.config.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }

  if (root.contains("sample")) {
    const json& p = root.at("sample");
    reject_unknown(p, "sample", {"net", "n_samples", "steps", "solver", "clamp_floor", "k"});
    auto& s = cfg.sample;
    const std::string net = get<std::string>(p, "net", "optimal_linear", "sample");
    if (net == "oracle") s.net = SampleSection::Net::Oracle;
    else if (net == "optimal_linear") s.net = SampleSection::Net::OptimalLinear;
    else if (net == "trained") s.net = SampleSection::Net::Trained;
    else throw ConfigError("sample.net must be 'oracle', 'optimal_linear' or 'trained'");
    s.n_samples = get<std::int64_t>(p, "n_samples", s.n_samples, "sample");
    if (s.n_samples < 0) throw ConfigError("sample.n_samples must be >= 0");
    s.run.steps = get<int>(p, "steps", s.run.steps, "sample");
    const std::string solver = get<std::string>(p, "solver", "heun", "sample");
    if (solver != "euler" && solver != "heun") throw ConfigError("sample.solver must be 'euler' or 'heun'");
    s.run.solver = solver == "euler" ? Solver::Euler : Solver::Heun;
    s.run.clamp_floor = get<double>(p, "clamp_floor", s.run.clamp_floor, "sample");
    if (p.contains("k")) s.k = get<double>(p, "k", 0.5, "sample");
    if (s.run.steps < 1) throw ConfigError("sample.steps must be >= 1");
  }
  return cfg;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  json root;
  try {
    root = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error: " + std::string(e.what()));
  }
  return parse_config(root);
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

/// Shortest decimal text that reads back to the same double at 17 significant
/// digits, independent of the C locale.
inline std::string format_number(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::vector<std::string>& header) : out_(path) {
    if (!out_) throw ConfigError("cannot write '" + path.string() + "'");
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << '\n';
  }

  void row(const std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << format_number(values[i]);
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

inline void write_json(const fs::path& path, const json& value) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << value.dump(2) << '\n';
}

struct Check {
  std::string name;
  bool passed;
  std::string detail;
};

struct Report {
  std::vector<Check> checks;
  std::vector<fs::path> files;

  void check(std::string name, bool passed, std::string detail = {}) {
    checks.push_back({std::move(name), passed, std::move(detail)});
  }
  bool ok() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
  }
  json checks_json() const {
    json out = json::object();
    for (const auto& c : checks) out[c.name] = c.passed;
    return out;
  }
};

/// Output directory, created and made absolute before any work starts.
inline fs::path prepare_output_dir(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  return fs::absolute(cfg.output_dir).lexically_normal();
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Closed forms hold for flow matching on the full unit interval with uniform t
/// and the u-loss.
inline bool closed_form_applies(const ExperimentConfig& cfg) {
  return cfg.measure.kind() == TimeMeasure::Kind::Uniform && cfg.measure.full_interval() && cfg.loss.is_u;
}

inline Spectrum data_spectrum(const ExperimentConfig& cfg) {
  if (cfg.data.colored()) return Spectrum(Eigen::Map<const Vector>(cfg.data.spectrum.data(), cfg.data.spectrum.size()));
  Vector lambda = Vector::Zero(cfg.data.D);
  lambda.head(cfg.data.d).setOnes();
  return Spectrum(std::move(lambda));
}

inline MomentSet k_moments(const ExperimentConfig& cfg, double k, int quad_nodes = kDefaultQuadNodes) {
  return compute_moments(cfg.process, TargetSpec::k_target(k), cfg.loss, cfg.measure, quad_nodes);
}

/// Theory optimum for constant k: the closed form where it applies, otherwise
/// a numeric minimization of the configured loss.
inline double theory_k_star(const ExperimentConfig& cfg, int quad_nodes = kDefaultQuadNodes) {
  const Spectrum spec = data_spectrum(cfg);
  if (closed_form_applies(cfg)) return colored_optimal_k(spec);
  return argmin_k([&](double k) { return colored_optimal_loss(spec, k_moments(cfg, k, quad_nodes)).total; });
}

inline ManifoldBasis make_basis(const ExperimentConfig& cfg) {
  Rng rng = Rng::derive(cfg.data_seed(), "geometry.basis");
  return random_orthonormal_basis(cfg.data.D, cfg.data.d, rng);
}

inline ColoredCovariance make_covariance(const ExperimentConfig& cfg) {
  Rng rng = Rng::derive(cfg.data_seed(), "geometry.basis");
  const int D = cfg.ambient_dim();
  const Matrix Q = random_orthogonal(D, rng);
  return ColoredCovariance::from_spectrum(Eigen::Map<const Vector>(cfg.data.spectrum.data(), D), Q);
}

// ---------------------------------------------------------------------------
// theory
// ---------------------------------------------------------------------------

inline Report cmd_theory(const ExperimentConfig& cfg) {
  const fs::path dir = prepare_output_dir(cfg);
  Report report;
  const Spectrum spec = data_spectrum(cfg);
  const int nodes = cfg.theory.quad_nodes;
  const int D = spec.dim();
  const int d = cfg.data.colored() ? 0 : cfg.data.d;

  bool nonneg = true;
  {
    CsvWriter csv(dir / "theory.csv", {"k", "delta_total", "delta_parallel", "delta_perpendicular"});
    for (int i = 0; i < cfg.theory.k_grid; ++i) {
      const double k = static_cast<double>(i) / (cfg.theory.k_grid - 1);
      const MomentSet m = k_moments(cfg, k, nodes);
      if (cfg.data.colored()) {
        const ColoredLoss c = colored_optimal_loss(spec, m);
        double par = 0, perp = 0;
        for (int j = 0; j < D; ++j) (spec.eigenvalues[j] > 0 ? par : perp) += c.per_mode[j];
        nonneg = nonneg && std::all_of(c.per_mode.begin(), c.per_mode.end(), [](double x) { return x >= -1e-12; });
        csv.row({k, c.total, par, perp});
      } else {
        const LossSplit l = optimal_loss(m, {D, d});
        nonneg = nonneg && l.parallel >= -1e-12 && l.perpendicular >= -1e-12;
        csv.row({k, l.total, l.parallel, l.perpendicular});
      }
    }
  }
  report.files.push_back(dir / "theory.csv");

  if (cfg.data.colored()) {
    CsvWriter csv(dir / "theory_colored.csv", [&] {
      std::vector<std::string> h = {"k", "delta_total"};
      for (int j = 0; j < D; ++j) h.push_back("delta_mode" + std::to_string(j));
      return h;
    }());
    for (int i = 0; i < cfg.theory.k_grid; ++i) {
      const double k = static_cast<double>(i) / (cfg.theory.k_grid - 1);
      const ColoredLoss c = colored_optimal_loss(spec, k_moments(cfg, k, nodes));
      std::vector<double> row = {k, c.total};
      row.insert(row.end(), c.per_mode.begin(), c.per_mode.end());
      csv.row(row);
    }
    report.files.push_back(dir / "theory_colored.csv");
  }

  auto total_at = [&](double k) { return colored_optimal_loss(spec, k_moments(cfg, k, nodes)).total; };
  const double numeric = argmin_k(total_at);
  const bool closed = closed_form_applies(cfg);
  const double k_star = closed ? colored_optimal_k(spec) : numeric;
  report.check("contributions_nonnegative", nonneg);
  if (closed)
    report.check("numeric_argmin_matches_closed_form", std::abs(numeric - k_star) <= 1e-6,
                 "numeric " + format_number(numeric) + " vs closed form " + format_number(k_star));

  json summary = {{"k_star", k_star},
                  {"delta_at_k_star", total_at(k_star)},
                  {"k_star_numeric", numeric},
                  {"closed_form", closed},
                  {"checks", report.checks_json()}};
  write_json(dir / "theory_summary.json", summary);
  report.files.push_back(dir / "theory_summary.json");
  return report;
}

// ---------------------------------------------------------------------------
// dynamics
// ---------------------------------------------------------------------------

inline Report cmd_dynamics(const ExperimentConfig& cfg) {
  if (cfg.data.colored()) throw ConfigError("dynamics runs on whitened manifold data; remove data.spectrum");
  const fs::path dir = prepare_output_dir(cfg);
  Report report;
  const ManifoldBasis basis = make_basis(cfg);
  const int D = basis.D();
  LinearModel init = LinearModel::zero(D);
  if (cfg.dynamics.random_init) {
    Rng rng = Rng::derive(cfg.seed, "lindyn.init");
    init = LinearModel(rng.normal_matrix(D, D) / std::sqrt(static_cast<double>(D)));
  }
  Rng flow_rng = Rng::derive(cfg.seed, "lindyn.flow");
  json summary;
  std::vector<FlowPoint> traj;
  try {
    traj = run_gradient_flow(init, basis, cfg.process, cfg.target, cfg.loss, cfg.measure, cfg.dynamics.flow,
                             &flow_rng);
  } catch (const Divergence& e) {
    report.check("no_divergence", false, e.what());
    summary = {{"passed", false}, {"error", e.what()}, {"checks", report.checks_json()}};
    write_json(dir / "dynamics_summary.json", summary);
    report.files.push_back(dir / "dynamics_summary.json");
    return report;
  }
  {
    CsvWriter csv(dir / "dynamics.csv", {"step", "loss", "dist_par", "dist_perp"});
    for (const auto& p : traj) csv.row({static_cast<double>(p.step), p.loss, p.dist_par, p.dist_perp});
  }
  report.files.push_back(dir / "dynamics.csv");

  const FlowPoint& last = traj.back();
  report.check("no_divergence", true);
  report.check("converged_parallel", last.dist_par < cfg.dynamics.tolerance,
               "final dist_par " + format_number(last.dist_par));
  report.check("converged_perpendicular", last.dist_perp < cfg.dynamics.tolerance,
               "final dist_perp " + format_number(last.dist_perp));

  if (cfg.dynamics.phi_shift) {
    const double shift = *cfg.dynamics.phi_shift;
    const TargetSpec base = cfg.target;
    const TargetSpec shifted{base.name + "+phi", [base, shift](double t) { return base.phi(t) + shift; }, base.psi,
                             std::nullopt};
    Rng rerun_rng = Rng::derive(cfg.seed, "lindyn.flow");
    const auto other = run_gradient_flow(init, basis, cfg.process, shifted, cfg.loss, cfg.measure,
                                         cfg.dynamics.flow, &rerun_rng);
    bool same = other.size() == traj.size();
    for (std::size_t i = 0; same && i < traj.size(); ++i)
      same = traj[i].perp == other[i].perp && traj[i].dist_perp == other[i].dist_perp;
    report.check("perpendicular_invariant_to_phi", same);
  }

  const MomentSet m = compute_moments(cfg.process, cfg.target, cfg.loss, cfg.measure);
  summary = {{"passed", report.ok()},
             {"final_step", last.step},
             {"final_loss", last.loss},
             {"final_dist_par", last.dist_par},
             {"final_dist_perp", last.dist_perp},
             {"tolerance", cfg.dynamics.tolerance},
             {"stability_bound", stability_bound(m)},
             {"checks", report.checks_json()}};
  write_json(dir / "dynamics_summary.json", summary);
  report.files.push_back(dir / "dynamics_summary.json");
  return report;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainedModel {
  std::optional<PureLinear> linear;
  std::optional<TwoLayer> two_layer;
  KParam kparam = KParam::constant(0.0);
  std::vector<HistoryRow> history;
};

/// Mean of k(t) under the configured time measure; equals k in constant mode.
inline double summarize_k(const KParam& kparam, const TimeMeasure& measure) {
  if (kparam.mode() == KParam::Mode::Constant) return kparam.value(0.0);
  // Piecewise-linear k: integrate each bin separately so the rule stays exact
  // up to the smoothness of the density.
  const int bins = kparam.bins();
  double acc = 0.0;
  for (int i = 0; i < bins; ++i) {
    const double a = std::max(measure.lo(), static_cast<double>(i) / bins);
    const double b = std::min(measure.hi(), static_cast<double>(i + 1) / bins);
    if (b <= a) continue;
    const QuadratureRule rule = gauss_legendre(16, a, b);
    acc += integrate(rule, [&](double t) { return measure.density(t) * kparam.value(t); });
  }
  return acc;
}

inline TrainedModel run_training(const ExperimentConfig& cfg) {
  const auto& s = cfg.train;
  TrainedModel out;
  out.kparam = KParam::from_k(s.config.k_init, s.binned ? KParam::Mode::Binned : KParam::Mode::Constant, s.bins,
                              s.config.k_trainable);
  const int D = cfg.ambient_dim();
  TrainConfig config = s.config;
  config.seed = cfg.seed;
  if (s.two_layer) {
    Rng init = Rng::derive(cfg.seed, "kdiff.net.init");
    out.two_layer.emplace(D, s.hidden, init);
    if (cfg.data.colored()) out.history = train(*out.two_layer, out.kparam, make_covariance(cfg), config);
    else out.history = train(*out.two_layer, out.kparam, make_basis(cfg), config);
  } else {
    out.linear.emplace(D);
    if (cfg.data.colored()) out.history = train(*out.linear, out.kparam, make_covariance(cfg), config);
    else out.history = train(*out.linear, out.kparam, make_basis(cfg), config);
  }
  return out;
}

inline Report cmd_train(const ExperimentConfig& cfg) {
  const fs::path dir = prepare_output_dir(cfg);
  Report report;
  const auto& s = cfg.train;
  TrainedModel model;
  try {
    model = run_training(cfg);
  } catch (const Divergence& e) {
    report.check("no_divergence", false, e.what());
    write_json(dir / "train_summary.json", {{"error", e.what()}, {"checks", report.checks_json()}});
    report.files.push_back(dir / "train_summary.json");
    return report;
  }
  report.check("no_divergence", true);
  {
    std::vector<std::string> header = {"step", "loss"};
    if (s.binned)
      for (const char* name : {"k_t0", "k_t0.25", "k_t0.5", "k_t0.75", "k_t1"}) header.push_back(name);
    else
      header.push_back("k");
    CsvWriter csv(dir / "history.csv", header);
    for (const auto& row : model.history) {
      if (row.step % s.log_every != 0 && row.step != s.config.steps) continue;
      std::vector<double> values = {static_cast<double>(row.step), row.loss};
      values.insert(values.end(), row.k.begin(), row.k.end());
      csv.row(values);
    }
  }
  report.files.push_back(dir / "history.csv");

  const double final_k = summarize_k(model.kparam, cfg.measure);
  // The trainer's u-loss target is the k-target under flow matching.
  ExperimentConfig theory_cfg = cfg;
  theory_cfg.loss = LossTargetSpec::u_loss();
  const double k_star = theory_k_star(theory_cfg);
  json summary = {{"final_k", final_k}, {"theory_k_star", k_star}, {"steps", s.config.steps}};
  if (!model.history.empty()) summary["final_loss"] = model.history.back().loss;
  if (s.binned) summary["final_k_probes"] = k_snapshot(model.kparam);
  const bool learned = s.config.k_trainable && s.config.steps > 0;
  if (learned) {
    const double gap = std::abs(final_k - k_star);
    summary["abs_gap"] = gap;
    // Only the u-loss has a theory fixed point to compare against.
    if (s.config.loss_mode == LossMode::ULoss)
      report.check("k_within_tolerance", gap <= s.tolerance,
                   "|" + format_number(final_k) + " - " + format_number(k_star) + "| > " + format_number(s.tolerance));
  }
  summary["checks"] = report.checks_json();
  write_json(dir / "train_summary.json", summary);
  report.files.push_back(dir / "train_summary.json");
  return report;
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

/// Straight-path predictor for known data rows x: velocity (x - z) / (1 - t),
/// reported as the k = 0.5 target u = v / 2. One Euler step from t = 0 lands
/// on x.
class OracleNet {
 public:
  OracleNet(Matrix X, double floor) : X_(std::move(X)), floor_(floor) {}
  int dim() const { return static_cast<int>(X_.cols()); }
  Matrix forward(const Matrix& Z, const Vector& t) const {
    Matrix U = X_ - Z;
    for (Eigen::Index i = 0; i < Z.rows(); ++i) U.row(i) *= 0.5 / std::max(1.0 - t[i], floor_);
    return U;
  }
  Vector backward(const Matrix&, const Vector&, const Matrix&) const { return {}; }
  Vector& params() { return theta_; }

 private:
  Matrix X_;
  double floor_;
  Vector theta_;
};

inline Report cmd_sample(const ExperimentConfig& cfg) {
  const fs::path dir = prepare_output_dir(cfg);
  Report report;
  const auto& s = cfg.sample;
  const int D = cfg.ambient_dim();
  const std::int64_t n = s.n_samples;
  Rng noise_rng = Rng::derive(cfg.seed, "sampler.noise");
  const Matrix Z0 = sample_noise(D, n, noise_rng);

  Matrix out;
  std::optional<Matrix> injected;
  if (s.net == SampleSection::Net::Oracle) {
    Rng data_rng = Rng::derive(cfg.seed, "sampler.oracle.data");
    injected = n > 0 ? (cfg.data.colored() ? sample_colored(make_covariance(cfg), n, data_rng)
                                           : sample_data(make_basis(cfg), n, data_rng))
                     : Matrix(0, D);
    const OracleNet net(*injected, s.run.clamp_floor);
    out = integrate(s.run, k_velocity_field(net, KParam::constant(0.0, false), s.run.clamp_floor), Z0);
  } else if (s.net == SampleSection::Net::OptimalLinear) {
    const double k = s.k.value_or(theory_k_star(cfg));
    if (!(k > 0.0 && k < 1.0)) throw ConfigError("sample.k must lie in (0, 1)");
    const Spectrum spec = cfg.data.colored() ? make_covariance(cfg).spectrum() : make_basis(cfg).spectrum();
    const MomentSet m = compute_moments(cfg.process, TargetSpec::k_target(k), LossTargetSpec::u_loss(), cfg.measure);
    const PureLinear net(colored_optimal_weight(spec, m));
    const KParam kp = KParam::from_k(k, KParam::Mode::Constant, 128, false);
    out = integrate(s.run, k_velocity_field(net, kp, s.run.clamp_floor), Z0);
  } else {
    TrainedModel model = run_training(cfg);
    if (model.linear)
      out = integrate(s.run, k_velocity_field(*model.linear, model.kparam, s.run.clamp_floor), Z0);
    else
      out = integrate(s.run, k_velocity_field(*model.two_layer, model.kparam, s.run.clamp_floor), Z0);
  }

  {
    std::vector<std::string> header;
    for (int j = 0; j < D; ++j) header.push_back("x" + std::to_string(j));
    CsvWriter csv(dir / "samples.csv", header);
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      std::vector<double> row(D);
      for (int j = 0; j < D; ++j) row[j] = out(i, j);
      csv.row(row);
    }
  }
  report.files.push_back(dir / "samples.csv");

  json diag = {{"n_samples", n}, {"steps", s.run.steps}, {"solver", s.run.solver == Solver::Euler ? "euler" : "heun"}};
  const bool manifold = !cfg.data.colored() && cfg.data.d < cfg.data.D;
  if (manifold && n > 0) {
    const ManifoldBasis basis = make_basis(cfg);
    const double f0 = off_manifold_fraction(Z0, basis);
    const double f1 = off_manifold_fraction(out, basis);
    diag["off_manifold_fraction_t0"] = f0;
    diag["off_manifold_fraction_t1"] = f1;
    if (s.net == SampleSection::Net::OptimalLinear)
      report.check("off_manifold_energy_decreases", f1 < f0,
                   "t=1 fraction " + format_number(f1) + " vs t=0 fraction " + format_number(f0));
  } else {
    diag["off_manifold_fraction_t0"] = nullptr;
    diag["off_manifold_fraction_t1"] = nullptr;
  }
  if (injected && n > 0) {
    const double err = (out - *injected).cwiseAbs().maxCoeff();
    diag["max_abs_error_to_injected"] = err;
    if (s.run.steps == 1 && s.run.solver == Solver::Euler)
      report.check("oracle_recovers_data", err <= 1e-12, "max abs error " + format_number(err));
  }
  diag["checks"] = report.checks_json();
  write_json(dir / "diagnostics.json", diag);
  report.files.push_back(dir / "diagnostics.json");
  return report;
}

/// Dispatch by subcommand name.
inline Report run(const std::string& command, const ExperimentConfig& cfg) {
  if (command == "theory") return cmd_theory(cfg);
  if (command == "dynamics") return cmd_dynamics(cfg);
  if (command == "train") return cmd_train(cfg);
  if (command == "sample") return cmd_sample(cfg);
  throw ConfigError("unknown command '" + command + "'");
}

}  // namespace kdiff::experiment
