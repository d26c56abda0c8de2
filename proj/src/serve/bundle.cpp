#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "caresurv/harness.hpp"
#include "caresurv/serve.hpp"
#include "caresurv/util.hpp"

namespace caresurv {

namespace {

template <typename... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <typename... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string pack(const std::vector<double>& v) { return pack_doubles(v); }
std::string pack(const Eigen::VectorXd& v) { return pack_doubles(std::span<const double>(v.data(), static_cast<std::size_t>(v.size()))); }

std::vector<double> unpack(const nlohmann::json& j) { return unpack_doubles(j.get<std::string>()); }

Eigen::VectorXd unpack_vector(const nlohmann::json& j) {
  const auto v = unpack(j);
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

nlohmann::json step_to_json(const StepFunction& f) {
  return {{"knots", pack(f.knots)}, {"values", pack(f.values)}, {"initial", f.initial}};
}

StepFunction step_from_json(const nlohmann::json& j) {
  StepFunction f;
  f.knots = unpack(j.at("knots"));
  f.values = unpack(j.at("values"));
  f.initial = j.at("initial").get<double>();
  if (f.knots.size() != f.values.size()) throw FormatError("step function knots and values differ in length");
  return f;
}

nlohmann::json tree_to_json(const RegressionTree& t) {
  std::vector<std::int32_t> feature, left, right;
  std::vector<double> threshold, cover, value;
  for (const auto& n : t.nodes) {
    feature.push_back(n.feature);
    left.push_back(n.left);
    right.push_back(n.right);
    threshold.push_back(n.threshold);
    cover.push_back(n.cover);
    value.push_back(n.value);
  }
  return {{"feature", pack_ints(feature)}, {"left", pack_ints(left)},   {"right", pack_ints(right)},
          {"threshold", pack(threshold)},  {"cover", pack(cover)},      {"value", pack(value)}};
}

RegressionTree tree_from_json(const nlohmann::json& j, std::size_t n_features) {
  const auto feature = unpack_ints(j.at("feature").get<std::string>());
  const auto left = unpack_ints(j.at("left").get<std::string>());
  const auto right = unpack_ints(j.at("right").get<std::string>());
  const auto threshold = unpack(j.at("threshold"));
  const auto cover = unpack(j.at("cover"));
  const auto value = unpack(j.at("value"));
  const std::size_t n = feature.size();
  if (left.size() != n || right.size() != n || threshold.size() != n || cover.size() != n || value.size() != n) {
    throw FormatError("tree arrays differ in length");
  }
  if (n == 0) throw FormatError("tree without nodes");
  RegressionTree t;
  for (std::size_t k = 0; k < n; ++k) {
    TreeNode node{feature[k], threshold[k], left[k], right[k], cover[k], value[k]};
    if (node.feature >= 0) {
      const auto in_range = [&](std::int32_t c) { return c > static_cast<std::int32_t>(k) && c < static_cast<std::int32_t>(n); };
      if (static_cast<std::size_t>(node.feature) >= n_features || !in_range(node.left) || !in_range(node.right)) {
        throw FormatError("tree node " + std::to_string(k) + " references an invalid feature or child");
      }
    }
    t.nodes.push_back(node);
  }
  return t;
}

nlohmann::json boost_params_json(const BoostParams& p) {
  return {{"preset", p.preset},
          {"tree_kind", p.tree_kind == TreeKind::kLeastSquares ? "least_squares" : "second_order"},
          {"n_rounds", p.n_rounds},
          {"learning_rate", p.learning_rate},
          {"max_depth", p.max_depth},
          {"min_samples_split", p.min_samples_split},
          {"min_samples_leaf", p.min_samples_leaf},
          {"min_child_weight", p.min_child_weight},
          {"subsample", p.subsample},
          {"max_features", p.max_features},
          {"colsample_bytree", p.colsample_bytree},
          {"gamma", p.gamma},
          {"lambda", p.lambda},
          {"dropout_rate", p.dropout_rate},
          {"seed", p.seed}};
}

BoostParams boost_params_from(const nlohmann::json& j) {
  BoostParams p;
  p.preset = j.at("preset").get<std::string>();
  p.tree_kind = j.at("tree_kind").get<std::string>() == "least_squares" ? TreeKind::kLeastSquares : TreeKind::kSecondOrder;
  p.n_rounds = j.at("n_rounds").get<int>();
  p.learning_rate = j.at("learning_rate").get<double>();
  p.max_depth = j.at("max_depth").get<int>();
  p.min_samples_split = j.at("min_samples_split").get<int>();
  p.min_samples_leaf = j.at("min_samples_leaf").get<int>();
  p.min_child_weight = j.at("min_child_weight").get<double>();
  p.subsample = j.at("subsample").get<double>();
  p.max_features = j.at("max_features").get<int>();
  p.colsample_bytree = j.at("colsample_bytree").get<double>();
  p.gamma = j.at("gamma").get<double>();
  p.lambda = j.at("lambda").get<double>();
  p.dropout_rate = j.at("dropout_rate").get<double>();
  p.seed = j.at("seed").get<std::uint64_t>();
  return p;
}

nlohmann::json forest_params_json(const ForestParams& p) {
  return {{"n_estimators", p.n_estimators},   {"max_depth", p.max_depth},
          {"min_samples_split", p.min_samples_split}, {"min_samples_leaf", p.min_samples_leaf},
          {"max_features", p.max_features},   {"bootstrap", p.bootstrap},
          {"seed", p.seed}};
}

ForestParams forest_params_from(const nlohmann::json& j) {
  ForestParams p;
  p.n_estimators = j.at("n_estimators").get<int>();
  p.max_depth = j.at("max_depth").get<int>();
  p.min_samples_split = j.at("min_samples_split").get<int>();
  p.min_samples_leaf = j.at("min_samples_leaf").get<int>();
  p.max_features = j.at("max_features").get<int>();
  p.bootstrap = j.at("bootstrap").get<bool>();
  p.seed = j.at("seed").get<std::uint64_t>();
  return p;
}

nlohmann::json cox_json(const CoxModel& m) {
  nlohmann::json j{{"kind", "cox"},
                   {"feature_names", m.feature_names},
                   {"coefficients", pack(m.coefficients)},
                   {"mean", pack(m.standardization.mean)},
                   {"scale", pack(m.standardization.scale)},
                   {"baseline_hazard", step_to_json(m.baseline_hazard)},
                   {"clipped_scores", m.clipped_scores},
                   {"convergence",
                    {{"iterations", m.convergence.iterations},
                     {"gradient_max_norm", m.convergence.gradient_max_norm},
                     {"converged", m.convergence.converged},
                     {"objective_trace", pack(m.convergence.objective_trace)},
                     {"diagnostic", m.convergence.diagnostic}}}};
  j["penalty"] = m.penalty ? nlohmann::json{{"preset", m.penalty->preset},
                                            {"alpha", m.penalty->alpha},
                                            {"l1_ratio", m.penalty->l1_ratio}}
                           : nlohmann::json(nullptr);
  return j;
}

CoxModel cox_from(const nlohmann::json& j) {
  CoxModel m;
  m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  m.coefficients = unpack_vector(j.at("coefficients"));
  m.standardization.mean = unpack_vector(j.at("mean"));
  m.standardization.scale = unpack_vector(j.at("scale"));
  const auto p = static_cast<Eigen::Index>(m.feature_names.size());
  if (m.coefficients.size() != p || m.standardization.mean.size() != p || m.standardization.scale.size() != p) {
    throw FormatError("cox model arrays do not match its feature list");
  }
  m.baseline_hazard = step_from_json(j.at("baseline_hazard"));
  m.clipped_scores = j.at("clipped_scores").get<std::size_t>();
  const auto& c = j.at("convergence");
  m.convergence.iterations = c.at("iterations").get<int>();
  m.convergence.gradient_max_norm = c.at("gradient_max_norm").get<double>();
  m.convergence.converged = c.at("converged").get<bool>();
  m.convergence.objective_trace = unpack(c.at("objective_trace"));
  m.convergence.diagnostic = c.at("diagnostic").get<std::string>();
  if (!j.at("penalty").is_null()) {
    const auto& pj = j.at("penalty");
    m.penalty = PenaltyInfo{pj.at("preset").get<std::string>(), pj.at("alpha").get<double>(),
                            pj.at("l1_ratio").get<double>()};
  }
  return m;
}

nlohmann::json boosted_json(const BoostedCoxModel& m) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : m.trees) trees.push_back(tree_to_json(t));
  return {{"kind", "boosted_cox"},
          {"feature_names", m.feature_names},
          {"trees", trees},
          {"params", boost_params_json(m.params)},
          {"learning_rate_folded", m.learning_rate_folded},
          {"baseline_hazard", step_to_json(m.baseline_hazard)},
          {"clipped_scores", m.clipped_scores},
          {"loss_trace", pack(m.loss_trace)}};
}

BoostedCoxModel boosted_from(const nlohmann::json& j) {
  BoostedCoxModel m;
  m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  for (const auto& t : j.at("trees")) m.trees.push_back(tree_from_json(t, m.feature_names.size()));
  m.params = boost_params_from(j.at("params"));
  m.learning_rate_folded = j.at("learning_rate_folded").get<bool>();
  m.baseline_hazard = step_from_json(j.at("baseline_hazard"));
  m.clipped_scores = j.at("clipped_scores").get<std::size_t>();
  m.loss_trace = unpack(j.at("loss_trace"));
  return m;
}

nlohmann::json forest_json(const SurvivalForestModel& m) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : m.trees) {
    std::vector<std::int32_t> nodes, offsets{0};
    std::vector<double> knots, values, initial;
    for (std::size_t k = 0; k < t.leaf_hazards.size(); ++k) {
      const auto& h = t.leaf_hazards[k];
      if (t.tree.nodes[k].feature >= 0) continue;
      nodes.push_back(static_cast<std::int32_t>(k));
      knots.insert(knots.end(), h.knots.begin(), h.knots.end());
      values.insert(values.end(), h.values.begin(), h.values.end());
      initial.push_back(h.initial);
      offsets.push_back(static_cast<std::int32_t>(knots.size()));
    }
    trees.push_back({{"tree", tree_to_json(t.tree)},
                     {"seed", t.seed},
                     {"leaf_nodes", pack_ints(nodes)},
                     {"leaf_offsets", pack_ints(offsets)},
                     {"leaf_knots", pack(knots)},
                     {"leaf_values", pack(values)},
                     {"leaf_initial", pack(initial)}});
  }
  return {{"kind", "survival_forest"},
          {"feature_names", m.feature_names},
          {"params", forest_params_json(m.params)},
          {"unique_times", pack(m.unique_times)},
          {"trees", trees}};
}

SurvivalForestModel forest_from(const nlohmann::json& j) {
  SurvivalForestModel m;
  m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  m.params = forest_params_from(j.at("params"));
  m.unique_times = unpack(j.at("unique_times"));
  for (const auto& tj : j.at("trees")) {
    SurvivalTree t;
    t.tree = tree_from_json(tj.at("tree"), m.feature_names.size());
    t.seed = tj.at("seed").get<std::uint64_t>();
    const auto nodes = unpack_ints(tj.at("leaf_nodes").get<std::string>());
    const auto offsets = unpack_ints(tj.at("leaf_offsets").get<std::string>());
    const auto knots = unpack(tj.at("leaf_knots"));
    const auto values = unpack(tj.at("leaf_values"));
    const auto initial = unpack(tj.at("leaf_initial"));
    if (offsets.size() != nodes.size() + 1 || initial.size() != nodes.size() || knots.size() != values.size() ||
        static_cast<std::size_t>(offsets.back()) != knots.size()) {
      throw FormatError("forest leaf hazard arrays are inconsistent");
    }
    t.leaf_hazards.assign(t.tree.nodes.size(), StepFunction{});
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      const auto node = static_cast<std::size_t>(nodes[k]);
      if (node >= t.tree.nodes.size() || t.tree.nodes[node].feature >= 0 || offsets[k] > offsets[k + 1]) {
        throw FormatError("forest leaf hazard references a non-leaf node");
      }
      auto& h = t.leaf_hazards[node];
      h.knots.assign(knots.begin() + offsets[k], knots.begin() + offsets[k + 1]);
      h.values.assign(values.begin() + offsets[k], values.begin() + offsets[k + 1]);
      h.initial = initial[k];
    }
    m.trees.push_back(std::move(t));
  }
  return m;
}

std::string payload_of(const ModelBundle& b) {
  nlohmann::json j;
  j["model"] = model_to_json(b.model);
  auto& scalers = j["scalers"] = nlohmann::json::array();
  for (const auto& s : b.scalers) scalers.push_back(s.to_json());
  j["cohort_baseline"] = {{"times", pack(b.cohort_baseline.times)}, {"survival", pack(b.cohort_baseline.survival)}};
  auto& feats = j["features"] = nlohmann::json::array();
  for (const auto& f : b.features) feats.push_back(feature_spec_to_json(f));
  j["imputation"] = b.imputation ? b.imputation->to_json() : nlohmann::json(nullptr);
  j["provenance"] = {{"config_hash", b.provenance.config_hash},
                     {"data_hash", b.provenance.data_hash},
                     {"seed", b.provenance.seed},
                     {"algorithm", b.provenance.algorithm},
                     {"metrics", b.provenance.metrics}};
  return j.dump();
}

ModelBundle bundle_from_payload(const nlohmann::json& j, int version) {
  ModelBundle b;
  b.schema_version = version;
  b.model = model_from_json(j.at("model"));
  for (const auto& s : j.at("scalers")) b.scalers.push_back(PlattScaler::from_json(s));
  b.cohort_baseline.times = unpack(j.at("cohort_baseline").at("times"));
  b.cohort_baseline.survival = unpack(j.at("cohort_baseline").at("survival"));
  for (const auto& f : j.at("features")) b.features.push_back(feature_spec_from_json(f));
  if (!j.at("imputation").is_null()) b.imputation = ImputationModelSet::from_json(j.at("imputation"));
  const auto& p = j.at("provenance");
  b.provenance.config_hash = p.at("config_hash").get<std::string>();
  b.provenance.data_hash = p.at("data_hash").get<std::string>();
  b.provenance.seed = p.at("seed").get<std::uint64_t>();
  b.provenance.algorithm = p.at("algorithm").get<std::string>();
  b.provenance.metrics = p.at("metrics");
  return b;
}

}  // namespace

void ModelBundle::validate() const {
  std::set<int> horizons;
  for (const auto& s : scalers) {
    if (s.horizon_days < 1) throw ValidationError("scaler horizon must be positive");
    if (!horizons.insert(s.horizon_days).second) {
      throw ValidationError("duplicate scaler horizon " + std::to_string(s.horizon_days));
    }
  }
  const auto& names = model_feature_names(model);
  std::vector<std::string> meta;
  for (const auto& f : features) meta.push_back(f.name);
  if (meta != names) throw ValidationError("feature metadata does not match the model's feature list");
  if (imputation && imputation->feature_names != names) {
    throw ValidationError("imputation models do not match the model's feature list");
  }
  if (cohort_baseline.times.size() != cohort_baseline.survival.size()) {
    throw ValidationError("cohort baseline times and survival differ in length");
  }
}

const PlattScaler* ModelBundle::scaler_for(int horizon_days) const {
  for (const auto& s : scalers) {
    if (s.horizon_days == horizon_days) return &s;
  }
  return nullptr;
}

nlohmann::json feature_spec_to_json(const FeatureSpec& f) {
  nlohmann::json answers = nlohmann::json::array();
  for (const auto& a : f.answers) answers.push_back({{"answer", a.answer}, {"code", a.code}});
  return {{"name", f.name},
          {"question", f.question},
          {"min_code", f.min_code},
          {"max_code", f.max_code},
          {"allowed_codes", f.allowed_codes},
          {"answers", answers},
          {"counted_items", f.counted_items}};
}

FeatureSpec feature_spec_from_json(const nlohmann::json& j) {
  FeatureSpec f;
  f.name = j.at("name").get<std::string>();
  f.question = j.at("question").get<std::string>();
  f.min_code = j.at("min_code").get<int>();
  f.max_code = j.at("max_code").get<int>();
  f.allowed_codes = j.at("allowed_codes").get<std::vector<int>>();
  for (const auto& a : j.at("answers")) f.answers.push_back({a.at("answer").get<std::string>(), a.at("code").get<int>()});
  f.counted_items = j.at("counted_items").get<std::vector<std::string>>();
  return f;
}

nlohmann::json model_to_json(const FittedModel& model) {
  return std::visit(Overloaded{[](const CoxModel& m) { return cox_json(m); },
                               [](const BoostedCoxModel& m) { return boosted_json(m); },
                               [](const SurvivalForestModel& m) { return forest_json(m); }},
                    model);
}

FittedModel model_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "cox") return cox_from(j);
  if (kind == "boosted_cox") return boosted_from(j);
  if (kind == "survival_forest") return forest_from(j);
  throw FormatError("unknown model kind '" + kind + "'");
}

std::string serialize_bundle(const ModelBundle& bundle) {
  bundle.validate();
  const std::string payload = payload_of(bundle);
  const nlohmann::json header{{"format", kBundleFormat},
                              {"schema_version", bundle.schema_version},
                              {"payload_bytes", payload.size()},
                              {"sha256", sha256_hex(payload)}};
  return header.dump() + "\n" + payload;
}

ModelBundle deserialize_bundle(const std::string& text) {
  const auto nl = text.find('\n');
  if (nl == std::string::npos) throw FormatError("bundle header is incomplete (file truncated?)");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bundle header is not valid JSON: ") + e.what());
  }
  try {
    if (header.at("format").get<std::string>() != kBundleFormat) {
      throw FormatError("not a model bundle (format '" + header.at("format").get<std::string>() + "')");
    }
    const int version = header.at("schema_version").get<int>();
    if (version != kBundleSchemaVersion) {
      throw FormatError("bundle schema version " + std::to_string(version) + " is not supported (this build reads version " +
                        std::to_string(kBundleSchemaVersion) + ")");
    }
    const std::string payload = text.substr(nl + 1);
    const auto expected = header.at("payload_bytes").get<std::size_t>();
    const auto digest = header.at("sha256").get<std::string>();
    if (sha256_hex(payload) != digest) {
      throw FormatError("bundle checksum mismatch: payload has " + std::to_string(payload.size()) + " bytes, header declares " +
                        std::to_string(expected));
    }
    if (payload.size() != expected) throw FormatError("bundle payload size differs from its header");
    ModelBundle b = bundle_from_payload(nlohmann::json::parse(payload), version);
    b.validate();
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed bundle: ") + e.what());
  } catch (const FormatError&) {
    throw;
  } catch (const ValidationError& e) {
    throw FormatError(std::string("bundle fails validation: ") + e.what());
  }
}

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& path) {
  const std::string text = serialize_bundle(bundle);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write bundle to " + path.string());
  out << text;
  out.flush();
  if (!out) throw std::runtime_error("failed writing bundle to " + path.string());
}

ModelBundle load_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read bundle " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_bundle(ss.str());
}

std::string bundle_id(const ModelBundle& bundle) { return sha256_hex(payload_of(bundle)); }

std::vector<double> default_curve_times() {
  std::vector<double> t{1};
  for (int d = 7; d <= 728; d += 7) t.push_back(d);
  for (int h : kHorizonPresetsDays) t.push_back(h);
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  return t;
}

ShapExplanation explain_any(const FittedModel& model, std::span<const double> x) {
  return std::visit(
      Overloaded{[&](const CoxModel& m) { return linear_shap(m, x); },
                 [&](const BoostedCoxModel& m) { return tree_shap(m, x); },
                 [&](const SurvivalForestModel& m) {
                   if (x.size() != m.feature_names.size()) throw ValidationError("record width differs from the forest");
                   ShapExplanation e;
                   e.feature_names = m.feature_names;
                   e.feature_values.assign(x.begin(), x.end());
                   e.contributions.assign(x.size(), 0.0);
                   for (const auto& t : m.trees) {
                     tree_shap(t.tree, x, e.contributions);
                     e.base_value += expected_value(t.tree);
                   }
                   const double n = m.trees.empty() ? 1.0 : static_cast<double>(m.trees.size());
                   for (auto& c : e.contributions) c /= n;
                   e.base_value /= n;
                   e.margin = m.risk_score(x);
                   return e;
                 }},
      model);
}

ModelBundle train_bundle(const Cohort& cohort, const TrainOptions& options) {
  if (cohort.size() == 0) throw ValidationError("train_bundle: empty cohort");
  algorithm_label(options.algorithm);
  auto sparse = drop_sparse_features(cohort, options.max_missing_fraction);
  auto pruned = prune_correlated(sparse.cohort, options.correlation_threshold);
  Cohort reduced = pruned.cohort;
  std::vector<std::size_t> varying;
  for (std::size_t j = 0; j < reduced.num_features(); ++j) {
    std::set<double> seen;
    for (const auto& r : reduced.records()) {
      if (r.values[j]) seen.insert(*r.values[j]);
    }
    if (seen.size() > 1) varying.push_back(j);
  }
  if (varying.empty()) throw ValidationError("train_bundle: no feature varies in the training cohort");
  reduced = reduced.select_features(varying);

  auto mice = fit_mice(reduced, options.mice_cycles, derive_seed(options.seed, 1));
  const auto names = mice.completed.feature_names();
  const Eigen::MatrixXd x = mice.completed.matrix();
  const Outcomes& outcomes = mice.completed.outcomes();

  const auto [inner, val] = stratified_split(outcomes, options.inner_train_fraction, derive_seed(options.seed, 2));
  Eigen::MatrixXd xin(static_cast<Eigen::Index>(inner.size()), x.cols());
  Outcomes oin, oval;
  for (std::size_t k = 0; k < inner.size(); ++k) {
    xin.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(inner[k]));
    oin.push_back(outcomes[inner[k]]);
  }
  const auto fit = fit_algorithm(options.algorithm, xin, oin, names, derive_seed(options.seed, 9), options.params);
  if (fit.columns.size() != names.size()) throw ValidationError("train_bundle: a feature is constant in the inner split");

  ModelBundle b;
  b.model = fit.model;
  std::vector<double> val_scores;
  for (auto i : val) {
    val_scores.push_back(fit.risk(x, static_cast<Eigen::Index>(i)));
    oval.push_back(outcomes[i]);
  }
  auto horizons = options.horizons;
  std::sort(horizons.begin(), horizons.end());
  horizons.erase(std::unique(horizons.begin(), horizons.end()), horizons.end());
  nlohmann::json val_auc = nlohmann::json::object();
  const auto censor_km = censoring_kaplan_meier(oin);
  for (int h : horizons) {
    b.scalers.push_back(fit_platt_at_horizon(val_scores, oval, h));
    const auto auc = dynamic_auc(h, val_scores, oval, censor_km);
    val_auc[std::to_string(h)] = auc ? nlohmann::json(*auc) : nlohmann::json(nullptr);
  }

  b.cohort_baseline.times = options.curve_times.empty() ? default_curve_times() : options.curve_times;
  b.cohort_baseline.survival.assign(b.cohort_baseline.times.size(), 0.0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index jj = 0; jj < x.cols(); ++jj) row[static_cast<std::size_t>(jj)] = x(i, jj);
    const auto c = predict_survival_any(b.model, row, b.cohort_baseline.times);
    for (std::size_t k = 0; k < c.survival.size(); ++k) b.cohort_baseline.survival[k] += c.survival[k];
  }
  for (auto& s : b.cohort_baseline.survival) s /= static_cast<double>(x.rows());

  b.features = mice.completed.features();
  b.imputation = mice.models;
  b.provenance.config_hash = options.config_hash;
  b.provenance.data_hash = cohort_hash(cohort);
  b.provenance.seed = options.seed;
  b.provenance.algorithm = options.algorithm;
  const auto harrell = harrell_cindex(val_scores, oval);
  b.provenance.metrics = {{"validation_harrell_cindex", harrell ? nlohmann::json(*harrell) : nlohmann::json(nullptr)},
                          {"validation_dynamic_auc", val_auc},
                          {"n_train", inner.size()},
                          {"n_validation", val.size()},
                          {"dropped_sparse", sparse.dropped},
                          {"dropped_correlated", pruned.report.dropped}};
  b.validate();
  return b;
}

}  // namespace caresurv
