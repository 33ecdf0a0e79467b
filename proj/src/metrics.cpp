#include "choir/metrics.hpp"

#include <charconv>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "choir/error.hpp"
#include "choir/parallel.hpp"

namespace choir {

namespace {

double parse_number(const std::string& text, const std::string& what) {
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw std::invalid_argument("bad " + what + " \"" + text + "\"");
  }
  return value;
}

// Fresh graph from the unrotated points in frozen mode, none otherwise.
Rotation predict_rotated(const PointCloud& pc, const Rotation& r, const CharacteristicOrientationPredictor& model) {
  const Dtype precision = model.config().precision;
  const PointCloud rotated = apply_rotation(pc, r, precision);
  if (model.config().knn_mode == KnnMode::frozen) {
    const KnnGraph graph = model.encoder_graph(pc);
    return model.predict(rotated, &graph);
  }
  return model.predict(rotated);
}

Rotation consistency_sample(const PointCloud& pc, const CharacteristicOrientationPredictor& model,
                            const EvalConfig& cfg, std::mt19937_64& rng) {
  const PointCloud q = cfg.perturbation.apply(pc, rng);
  if (!cfg.rotated_consistency) return model.predict(q);
  const Rotation r = so3::sample_uniform(rng);
  return predict_rotated(q, r, model) * r.transposed();
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

}  // namespace

PointCloud Perturbation::apply(const PointCloud& pc, std::mt19937_64& rng) const {
  switch (kind) {
    case Kind::none:
      return pc;
    case Kind::resample:
      return center(resample(pc, static_cast<std::size_t>(magnitude), rng));
    case Kind::gaussian:
      return gaussian_noise(pc, magnitude, rng);
  }
  return pc;
}

std::string Perturbation::str() const {
  std::ostringstream out;
  switch (kind) {
    case Kind::none:
      return "none";
    case Kind::resample:
      out << "resample:" << static_cast<std::size_t>(magnitude);
      break;
    case Kind::gaussian:
      out << "gaussian:" << magnitude;
      break;
  }
  return out.str();
}

Perturbation parse_perturbation(const std::string& text) {
  if (text.empty() || text == "none") return {};
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  if (colon == std::string::npos) throw std::invalid_argument("perturbation \"" + text + "\" needs a magnitude");
  const double value = parse_number(text.substr(colon + 1), "perturbation magnitude");
  if (kind == "gaussian") {
    if (!(value >= 0.0)) throw std::invalid_argument("gaussian sigma must be non-negative");
    return {Perturbation::Kind::gaussian, value};
  }
  if (kind == "resample") {
    if (value < 1.0 || value != std::floor(value)) throw std::invalid_argument("resample needs a positive point count");
    return {Perturbation::Kind::resample, value};
  }
  throw std::invalid_argument("unknown perturbation \"" + kind + "\" (expected gaussian or resample)");
}

MetricValue angular_spread(std::span<const Rotation> rotations) {
  if (rotations.empty()) throw std::invalid_argument("angular spread of an empty set");
  const auto mean = so3::chordal_mean(rotations);
  double total = 0.0;
  for (const auto& r : rotations) {
    const double a = so3::angle_between(r, mean.rotation);
    total += a * a;
  }
  return {so3::degrees(std::sqrt(total / static_cast<double>(rotations.size()))), mean.degenerate};
}

MetricValue stability(const PointCloud& pc, const CharacteristicOrientationPredictor& model, const EvalConfig& cfg,
                      std::mt19937_64& rng) {
  if (cfg.rotations < 2) throw std::invalid_argument("stability needs at least 2 rotations");
  std::vector<Rotation> net;
  net.reserve(cfg.rotations);
  for (std::size_t i = 0; i < cfg.rotations; ++i) {
    const Rotation r = so3::sample_uniform(rng);
    const PointCloud q = cfg.perturbation.apply(pc, rng);
    net.push_back(r * predict_rotated(q, r, model).transposed());
  }
  return angular_spread(net);
}

MetricValue consistency(std::span<const PointCloud> instances, const CharacteristicOrientationPredictor& model,
                        const EvalConfig& cfg, std::mt19937_64& rng) {
  if (instances.size() < 2) throw std::invalid_argument("consistency needs at least 2 instances");
  std::vector<Rotation> predicted;
  predicted.reserve(instances.size());
  for (const auto& pc : instances) predicted.push_back(consistency_sample(pc, model, cfg, rng));
  return angular_spread(predicted);
}

double EvalReport::mean_stability() const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& c : classes) {
    if (std::isfinite(c.mean_stability_deg)) {
      total += c.mean_stability_deg;
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : nan();
}

double EvalReport::mean_consistency() const {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& c : classes) {
    if (std::isfinite(c.consistency_deg)) {
      total += c.consistency_deg;
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : nan();
}

const ClassResult* EvalReport::find(const std::string& class_id) const {
  for (const auto& c : classes) {
    if (c.class_id == class_id) return &c;
  }
  return nullptr;
}

EvalReport evaluate(const Dataset& data, const CharacteristicOrientationPredictor& model, const EvalConfig& cfg) {
  CharacteristicOrientationPredictor m = model;
  if (cfg.knn_mode) m.mutable_config().knn_mode = *cfg.knn_mode;

  EvalReport report;
  report.metadata["seed"] = std::to_string(cfg.seed);
  report.metadata["knn_mode"] = knn_mode_name(m.config().knn_mode);
  report.metadata["precision"] = m.config().precision == Dtype::f32 ? "single" : "double";
  report.metadata["rotations"] = std::to_string(cfg.rotations);
  report.metadata["perturbation"] = cfg.perturbation.str();
  report.metadata["points"] = cfg.points ? std::to_string(cfg.points) : "as-loaded";
  report.metadata["consistency_protocol"] = cfg.rotated_consistency ? "rotated" : "aligned";

  const std::size_t n = data.clouds.size();
  std::vector<PointCloud> clouds(n);
  std::vector<double> stab(n, nan());
  std::vector<Rotation> pred(n);
  std::vector<bool> degenerate(n, false);
  parallel_for(n, thread_budget(cfg.threads), [&](std::size_t i) {
    const PointCloud& src = data.clouds[i];
    if (cfg.points) {
      std::mt19937_64 rng(derive_seed(cfg.seed, 0, i));
      clouds[i] = center(resample(src, cfg.points, rng));
    } else {
      clouds[i] = src;
    }
    std::mt19937_64 srng(derive_seed(cfg.seed, 1, i));
    const MetricValue s = stability(clouds[i], m, cfg, srng);
    stab[i] = s.degrees;
    degenerate[i] = s.degenerate_mean;
    std::mt19937_64 crng(derive_seed(cfg.seed, 2, i));
    pred[i] = consistency_sample(clouds[i], m, cfg, crng);
  });

  for (const auto& class_id : data.class_ids()) {
    const auto idx = data.indices_of(class_id);
    if (idx.empty()) {
      report.warnings.push_back("class " + class_id + " has no instances; omitted");
      continue;
    }
    ClassResult c;
    c.class_id = class_id;
    double total = 0.0;
    for (auto i : idx) {
      c.instances.push_back({data.clouds[i].instance_id, stab[i]});
      total += stab[i];
      if (degenerate[i]) {
        report.warnings.push_back("degenerate chordal mean in stability of " + data.clouds[i].instance_id);
      }
    }
    c.mean_stability_deg = total / static_cast<double>(idx.size());
    if (idx.size() < 2) {
      c.consistency_deg = nan();
      report.warnings.push_back("class " + class_id + " has a single instance; consistency omitted");
    } else {
      std::vector<Rotation> rs;
      for (auto i : idx) rs.push_back(pred[i]);
      const MetricValue v = angular_spread(rs);
      c.consistency_deg = v.degrees;
      c.degenerate_mean = v.degenerate_mean;
      if (v.degenerate_mean) report.warnings.push_back("degenerate chordal mean in consistency of class " + class_id);
    }
    report.classes.push_back(std::move(c));
  }
  return report;
}

namespace {

std::string format_double(double v) {
  if (!std::isfinite(v)) return "";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace

void write_report_csv(std::ostream& out, const EvalReport& report) {
  for (const auto& [key, value] : report.metadata) out << "# " << key << ": " << value << '\n';
  for (const auto& w : report.warnings) out << "# warning: " << w << '\n';
  out << "class_id,instances,mean_stability_deg,consistency_deg,degenerate_mean\n";
  for (const auto& c : report.classes) {
    out << c.class_id << ',' << c.instances.size() << ',' << format_double(c.mean_stability_deg) << ','
        << format_double(c.consistency_deg) << ',' << (c.degenerate_mean ? 1 : 0) << '\n';
  }
}

void write_report_json(std::ostream& out, const EvalReport& report) {
  using nlohmann::json;
  auto number = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json doc;
  doc["metadata"] = report.metadata;
  doc["warnings"] = report.warnings;
  doc["classes"] = json::array();
  for (const auto& c : report.classes) {
    json jc;
    jc["class_id"] = c.class_id;
    jc["mean_stability_deg"] = number(c.mean_stability_deg);
    jc["consistency_deg"] = number(c.consistency_deg);
    jc["degenerate_mean"] = c.degenerate_mean;
    jc["instances"] = json::array();
    for (const auto& i : c.instances) {
      jc["instances"].push_back({{"instance_id", i.instance_id}, {"stability_deg", number(i.stability_deg)}});
    }
    doc["classes"].push_back(std::move(jc));
  }
  out << doc.dump(2) << '\n';
}

EvalReport read_report_json(std::istream& in) {
  using nlohmann::json;
  auto number = [](const json& j) { return j.is_null() ? nan() : j.get<double>(); };
  try {
    const json doc = json::parse(in);
    EvalReport report;
    report.metadata = doc.at("metadata").get<std::map<std::string, std::string>>();
    report.warnings = doc.at("warnings").get<std::vector<std::string>>();
    for (const auto& jc : doc.at("classes")) {
      ClassResult c;
      c.class_id = jc.at("class_id").get<std::string>();
      c.mean_stability_deg = number(jc.at("mean_stability_deg"));
      c.consistency_deg = number(jc.at("consistency_deg"));
      c.degenerate_mean = jc.at("degenerate_mean").get<bool>();
      for (const auto& ji : jc.at("instances")) {
        c.instances.push_back({ji.at("instance_id").get<std::string>(), number(ji.at("stability_deg"))});
      }
      report.classes.push_back(std::move(c));
    }
    return report;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
}

}  // namespace choir
