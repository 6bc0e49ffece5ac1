#include "didmean/learners.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "didmean/errors.hpp"
#include "didmean/rng.hpp"

namespace didmean {

namespace {

constexpr double kCoordTol = 1e-8;   // elastic-net coefficient max-change
constexpr double kScoreTol = 1e-8;   // IRLS mean-score max-norm
constexpr double kFallbackRidge = 1e-6;
constexpr int kLambdaGridSize = 20;

double expit(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Feature maps, resolved against a concrete column layout.
// ---------------------------------------------------------------------------

struct ResolvedTerm {
  FeatureTerm::Op op;
  int a;
  int b;  // Product only
  int power;  // Raw with power > 1 encodes polynomial powers
};

struct ResolvedMap {
  std::vector<ResolvedTerm> terms;

  Eigen::MatrixXd apply(const Eigen::MatrixXd& X) const {
    Eigen::MatrixXd out(X.rows(), static_cast<int>(terms.size()));
    for (std::size_t c = 0; c < terms.size(); ++c) {
      const auto& t = terms[c];
      auto col = out.col(static_cast<int>(c));
      switch (t.op) {
        case FeatureTerm::Raw:
          if (t.power <= 1) col = X.col(t.a);
          else col = X.col(t.a).array().pow(t.power);
          break;
        case FeatureTerm::Sin: col = X.col(t.a).array().sin(); break;
        case FeatureTerm::Cos: col = X.col(t.a).array().cos(); break;
        case FeatureTerm::Square: col = X.col(t.a).array().square(); break;
        case FeatureTerm::Product:
          col = X.col(t.a).array() * X.col(t.b).array();
          break;
      }
    }
    return out;
  }
};

int find_column(const std::vector<std::string>& names, const std::string& name) {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  return -1;
}

ResolvedMap resolve_map(const FeatureMap& map, int width,
                        const std::vector<std::string>& names) {
  ResolvedMap resolved;
  switch (map.kind) {
    case FeatureMap::Identity:
      for (int j = 0; j < width; ++j)
        resolved.terms.push_back({FeatureTerm::Raw, j, -1, 1});
      break;
    case FeatureMap::Polynomial: {
      if (map.degree < 1) throw ValidationError("polynomial degree must be >= 1");
      for (int j = 0; j < width; ++j)
        resolved.terms.push_back({FeatureTerm::Raw, j, -1, 1});
      for (int p = 2; p <= map.degree; ++p)
        for (int j = 0; j < width; ++j)
          resolved.terms.push_back({FeatureTerm::Raw, j, -1, p});
      if (map.interactions) {
        for (int a = 0; a < width; ++a)
          for (int b = a + 1; b < width; ++b)
            resolved.terms.push_back({FeatureTerm::Product, a, b, 1});
      }
      break;
    }
    case FeatureMap::Custom: {
      if (map.include_raw)
        for (int j = 0; j < width; ++j)
          resolved.terms.push_back({FeatureTerm::Raw, j, -1, 1});
      for (const auto& term : map.terms) {
        const int a = find_column(names, term.col);
        const int b =
            term.op == FeatureTerm::Product ? find_column(names, term.col2) : 0;
        if (a < 0 || b < 0) {
          if (map.skip_missing) continue;
          throw ValidationError("feature map references unknown column '" +
                                (a < 0 ? term.col : term.col2) + "'");
        }
        resolved.terms.push_back({term.op, a, term.op == FeatureTerm::Product ? b : -1, 1});
      }
      break;
    }
  }
  if (resolved.terms.empty())
    throw ValidationError("feature map resolves to an empty design");
  return resolved;
}

// ---------------------------------------------------------------------------
// Weighted standardization. Weights are normalized to mean one so that the
// penalized objectives keep their 1/n scaling.
// ---------------------------------------------------------------------------

Eigen::VectorXd normalized_weights(const Eigen::VectorXd* weights, int n) {
  if (weights == nullptr) return Eigen::VectorXd::Ones(n);
  if (weights->size() != n)
    throw ValidationError("weights length does not match the number of rows");
  if ((weights->array() < 0).any())
    throw ValidationError("weights must be non-negative");
  const double total = weights->sum();
  if (total <= 0) throw ValidationError("weights sum to zero");
  return (*weights) * (static_cast<double>(n) / total);
}

struct Standardizer {
  Eigen::VectorXd center;
  Eigen::VectorXd scale;

  void fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& w) {
    const double n = static_cast<double>(X.rows());
    center = (X.transpose() * w) / n;
    scale.resize(X.cols());
    for (int j = 0; j < X.cols(); ++j) {
      const double var =
          (w.array() * (X.col(j).array() - center[j]).square()).sum() / n;
      scale[j] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
  }

  Eigen::MatrixXd transform(const Eigen::MatrixXd& X) const {
    return (X.rowwise() - center.transpose()).array().rowwise() /
           scale.transpose().array();
  }
};

// ---------------------------------------------------------------------------
// Model implementations. All immutable; eval receives the mapped design.
// ---------------------------------------------------------------------------

struct ModelImpl {
  virtual ~ModelImpl() = default;
  virtual Eigen::VectorXd eval(const Eigen::MatrixXd& design) const = 0;
};

struct ConstantImpl : ModelImpl {
  double value;
  explicit ConstantImpl(double v) : value(v) {}
  Eigen::VectorXd eval(const Eigen::MatrixXd& design) const override {
    return Eigen::VectorXd::Constant(design.rows(), value);
  }
};

struct AffineImpl : ModelImpl {
  double intercept;
  Eigen::VectorXd coef;
  bool logistic_link;
  AffineImpl(double b0, Eigen::VectorXd b, bool logistic)
      : intercept(b0), coef(std::move(b)), logistic_link(logistic) {}
  Eigen::VectorXd eval(const Eigen::MatrixXd& design) const override {
    Eigen::VectorXd eta =
        (design * coef).array() + intercept;
    if (logistic_link)
      for (int i = 0; i < eta.size(); ++i) eta[i] = expit(eta[i]);
    return eta;
  }
};

struct StratumImpl : ModelImpl {
  std::map<std::vector<double>, double> table;
  double fallback;
  Eigen::VectorXd eval(const Eigen::MatrixXd& design) const override {
    Eigen::VectorXd out(design.rows());
    std::vector<double> key(static_cast<std::size_t>(design.cols()));
    for (int i = 0; i < design.rows(); ++i) {
      for (int j = 0; j < design.cols(); ++j)
        key[static_cast<std::size_t>(j)] = design(i, j);
      const auto it = table.find(key);
      out[i] = it != table.end() ? it->second : fallback;
    }
    return out;
  }
};

struct TreeNode {
  int feature = -1;  // -1: leaf
  double threshold = 0.0;
  double value = 0.0;
  int left = -1;
  int right = -1;
};

struct TreeImpl : ModelImpl {
  std::vector<TreeNode> nodes;
  double eval_one(const Eigen::MatrixXd& design, int row) const {
    int node = 0;
    while (nodes[static_cast<std::size_t>(node)].feature >= 0) {
      const auto& nd = nodes[static_cast<std::size_t>(node)];
      node = design(row, nd.feature) <= nd.threshold ? nd.left : nd.right;
    }
    return nodes[static_cast<std::size_t>(node)].value;
  }
  Eigen::VectorXd eval(const Eigen::MatrixXd& design) const override {
    Eigen::VectorXd out(design.rows());
    for (int i = 0; i < design.rows(); ++i) out[i] = eval_one(design, i);
    return out;
  }
};

struct ForestImpl : ModelImpl {
  std::vector<TreeImpl> trees;
  Eigen::VectorXd eval(const Eigen::MatrixXd& design) const override {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(design.rows());
    for (const auto& tree : trees) out += tree.eval(design);
    return out / static_cast<double>(trees.size());
  }
};

struct StackImpl : ModelImpl {
  std::vector<FittedModel> members;
  Eigen::VectorXd weights;
  // Stack evaluates on the raw design (its own map is identity); each member
  // applies its own feature map.
  Eigen::VectorXd eval(const Eigen::MatrixXd& design) const override {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(design.rows());
    for (std::size_t b = 0; b < members.size(); ++b) {
      if (weights[static_cast<int>(b)] == 0.0) continue;
      out += weights[static_cast<int>(b)] * members[b].predict(design);
    }
    return out;
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// FittedModel surface
// ---------------------------------------------------------------------------

struct FittedModel::State {
  LearnerSpec spec;
  ResolvedMap map;
  std::shared_ptr<const ModelImpl> model;
  int input_width = 0;
  bool probability = false;
  std::vector<std::string> notes;
};

Eigen::VectorXd FittedModel::predict(const Eigen::MatrixXd& features) const {
  if (!state_) throw Error("predict on an empty model");
  if (features.cols() != state_->input_width)
    throw ValidationError("feature width mismatch: expected " +
                          std::to_string(state_->input_width) + ", got " +
                          std::to_string(features.cols()));
  Eigen::VectorXd out = state_->model->eval(state_->map.apply(features));
  if (state_->probability)
    out = out.cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

double FittedModel::predict_one(const Eigen::RowVectorXd& features) const {
  Eigen::MatrixXd one = features;
  return predict(one)[0];
}

bool FittedModel::probability_mode() const { return state_ && state_->probability; }
int FittedModel::input_width() const { return state_ ? state_->input_width : 0; }
const LearnerSpec& FittedModel::spec() const {
  static const LearnerSpec empty;
  return state_ ? state_->spec : empty;
}
const std::vector<std::string>& FittedModel::notes() const {
  static const std::vector<std::string> none;
  return state_ ? state_->notes : none;
}
bool FittedModel::has_note(const std::string& prefix) const {
  for (const auto& n : notes())
    if (n.rfind(prefix, 0) == 0) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Spec validation and JSON round trip
// ---------------------------------------------------------------------------

std::string to_string(LearnerKind kind) {
  switch (kind) {
    case LearnerKind::Mean: return "mean";
    case LearnerKind::Stratum: return "stratum";
    case LearnerKind::Linear: return "linear";
    case LearnerKind::Ridge: return "ridge";
    case LearnerKind::ElasticNet: return "elastic_net";
    case LearnerKind::Logistic: return "logistic";
    case LearnerKind::LogisticElasticNet: return "logistic_elastic_net";
    case LearnerKind::Tree: return "tree";
    case LearnerKind::BaggedTrees: return "bagged_trees";
    case LearnerKind::Stack: return "stack";
  }
  throw Error("unreachable learner kind");
}

LearnerKind learner_kind_from_string(const std::string& name) {
  static const std::map<std::string, LearnerKind> table = {
      {"mean", LearnerKind::Mean},
      {"stratum", LearnerKind::Stratum},
      {"linear", LearnerKind::Linear},
      {"ridge", LearnerKind::Ridge},
      {"elastic_net", LearnerKind::ElasticNet},
      {"logistic", LearnerKind::Logistic},
      {"logistic_elastic_net", LearnerKind::LogisticElasticNet},
      {"tree", LearnerKind::Tree},
      {"bagged_trees", LearnerKind::BaggedTrees},
      {"stack", LearnerKind::Stack}};
  const auto it = table.find(name);
  if (it == table.end()) throw ValidationError("unknown learner kind: " + name);
  return it->second;
}

void validate(const LearnerSpec& spec) {
  if (spec.lambda && *spec.lambda < 0) throw ValidationError("lambda must be >= 0");
  if (spec.alpha < 0 || spec.alpha > 1) throw ValidationError("alpha must lie in [0,1]");
  if (spec.cv_folds < 2) throw ValidationError("cv_folds must be >= 2");
  if (spec.max_depth < 0) throw ValidationError("max_depth must be >= 0");
  if (spec.min_leaf < 1) throw ValidationError("min_leaf must be >= 1");
  if (spec.n_bags < 1) throw ValidationError("n_bags must be >= 1");
  if (spec.kind == LearnerKind::Stack) {
    if (spec.members.empty()) throw ValidationError("stack requires members");
    if (spec.feature_map.kind != FeatureMap::Identity)
      throw ValidationError("stack members own their feature maps; the stack's must be identity");
    for (const auto& m : spec.members) {
      if (m.kind == LearnerKind::Stack)
        throw ValidationError("stack members must not be stacks");
      validate(m);
    }
  }
}

nlohmann::json to_json(const FeatureMap& map) {
  nlohmann::json j;
  switch (map.kind) {
    case FeatureMap::Identity: j["kind"] = "identity"; break;
    case FeatureMap::Polynomial:
      j["kind"] = "polynomial";
      j["degree"] = map.degree;
      j["interactions"] = map.interactions;
      break;
    case FeatureMap::Custom: {
      j["kind"] = "custom";
      j["include_raw"] = map.include_raw;
      j["skip_missing"] = map.skip_missing;
      nlohmann::json terms = nlohmann::json::array();
      for (const auto& t : map.terms) {
        nlohmann::json jt;
        switch (t.op) {
          case FeatureTerm::Raw: jt["op"] = "raw"; break;
          case FeatureTerm::Sin: jt["op"] = "sin"; break;
          case FeatureTerm::Cos: jt["op"] = "cos"; break;
          case FeatureTerm::Square: jt["op"] = "square"; break;
          case FeatureTerm::Product: jt["op"] = "product"; break;
        }
        jt["col"] = t.col;
        if (t.op == FeatureTerm::Product) jt["col2"] = t.col2;
        terms.push_back(jt);
      }
      j["terms"] = terms;
      break;
    }
  }
  return j;
}

FeatureMap feature_map_from_json(const nlohmann::json& j) {
  FeatureMap map;
  const std::string kind = j.value("kind", std::string("identity"));
  if (kind == "identity") {
    map.kind = FeatureMap::Identity;
  } else if (kind == "polynomial") {
    map.kind = FeatureMap::Polynomial;
    map.degree = j.value("degree", 2);
    map.interactions = j.value("interactions", true);
  } else if (kind == "custom") {
    map.kind = FeatureMap::Custom;
    map.include_raw = j.value("include_raw", true);
    map.skip_missing = j.value("skip_missing", false);
    for (const auto& jt : j.value("terms", nlohmann::json::array())) {
      FeatureTerm t;
      const std::string op = jt.at("op").get<std::string>();
      if (op == "raw") t.op = FeatureTerm::Raw;
      else if (op == "sin") t.op = FeatureTerm::Sin;
      else if (op == "cos") t.op = FeatureTerm::Cos;
      else if (op == "square") t.op = FeatureTerm::Square;
      else if (op == "product") t.op = FeatureTerm::Product;
      else throw ValidationError("unknown feature term op: " + op);
      t.col = jt.at("col").get<std::string>();
      if (t.op == FeatureTerm::Product) t.col2 = jt.at("col2").get<std::string>();
      map.terms.push_back(t);
    }
  } else {
    throw ValidationError("unknown feature map kind: " + kind);
  }
  return map;
}

nlohmann::json to_json(const LearnerSpec& spec) {
  nlohmann::json j;
  j["kind"] = to_string(spec.kind);
  if (spec.lambda) j["lambda"] = *spec.lambda;
  j["alpha"] = spec.alpha;
  j["max_depth"] = spec.max_depth;
  j["min_leaf"] = spec.min_leaf;
  j["n_bags"] = spec.n_bags;
  j["cv_folds"] = spec.cv_folds;
  j["feature_map"] = to_json(spec.feature_map);
  if (!spec.members.empty()) {
    nlohmann::json members = nlohmann::json::array();
    for (const auto& m : spec.members) members.push_back(to_json(m));
    j["members"] = members;
  }
  return j;
}

LearnerSpec learner_spec_from_json(const nlohmann::json& j) {
  LearnerSpec spec;
  spec.kind = learner_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("lambda") && !j.at("lambda").is_null())
    spec.lambda = j.at("lambda").get<double>();
  spec.alpha = j.value("alpha", 1.0);
  spec.max_depth = j.value("max_depth", 3);
  spec.min_leaf = j.value("min_leaf", 5);
  spec.n_bags = j.value("n_bags", 20);
  spec.cv_folds = j.value("cv_folds", 10);
  if (j.contains("feature_map")) spec.feature_map = feature_map_from_json(j.at("feature_map"));
  if (j.contains("members"))
    for (const auto& m : j.at("members")) spec.members.push_back(learner_spec_from_json(m));
  validate(spec);
  return spec;
}

// ---------------------------------------------------------------------------
// Fold assignment
// ---------------------------------------------------------------------------

std::vector<int> cv_fold_ids(int n_rows, int v_folds, std::uint64_t seed) {
  if (v_folds < 2) throw ValidationError("fold count must be >= 2");
  if (n_rows < v_folds)
    throw ValidationError("need at least one row per fold: " + std::to_string(n_rows) +
                          " rows for " + std::to_string(v_folds) + " folds");
  std::vector<int> order(static_cast<std::size_t>(n_rows));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<int> fold(static_cast<std::size_t>(n_rows));
  const int base = n_rows / v_folds;
  const int extra = n_rows % v_folds;
  int pos = 0;
  for (int v = 0; v < v_folds; ++v) {
    const int size = base + (v < extra ? 1 : 0);
    for (int s = 0; s < size; ++s)
      fold[static_cast<std::size_t>(order[static_cast<std::size_t>(pos++)])] = v;
  }
  return fold;
}

// ---------------------------------------------------------------------------
// Simplex least squares for stack weights
// ---------------------------------------------------------------------------

namespace {

Eigen::VectorXd project_to_simplex(Eigen::VectorXd v) {
  // Euclidean projection onto {w >= 0, sum w = 1} via the sorted-threshold rule.
  const int n = static_cast<int>(v.size());
  std::vector<double> u(v.data(), v.data() + n);
  std::sort(u.begin(), u.end(), std::greater<double>());
  double css = 0.0;
  double theta = 0.0;
  int rho = 0;
  for (int i = 0; i < n; ++i) {
    css += u[static_cast<std::size_t>(i)];
    const double t = (css - 1.0) / (i + 1);
    if (u[static_cast<std::size_t>(i)] - t > 0) {
      rho = i + 1;
      theta = t;
    }
  }
  (void)rho;
  for (int i = 0; i < n; ++i) v[i] = std::max(v[i] - theta, 0.0);
  const double s = v.sum();
  if (s > 0) v /= s;
  return v;
}

}  // namespace

Eigen::VectorXd simplex_ls_weights(const Eigen::MatrixXd& Z, const Eigen::VectorXd& y,
                                   const Eigen::VectorXd* weights) {
  const int n = static_cast<int>(Z.rows());
  const int m = static_cast<int>(Z.cols());
  if (m == 1) return Eigen::VectorXd::Ones(1);
  const Eigen::VectorXd w = normalized_weights(weights, n);

  const Eigen::MatrixXd Zw = Z.array().colwise() * w.array();
  const Eigen::MatrixXd G = (Zw.transpose() * Z) / n;   // gradient = G w - b
  const Eigen::VectorXd b = (Zw.transpose() * y) / n;
  const double y2 = (w.array() * y.array().square()).sum() / n;
  auto risk = [&](const Eigen::VectorXd& v) {
    return v.dot(G * v) - 2.0 * b.dot(v) + y2;
  };

  // Start at the best vertex so the final risk can never exceed the best
  // single member's.
  int best = 0;
  double best_risk = std::numeric_limits<double>::infinity();
  for (int j = 0; j < m; ++j) {
    const double r = G(j, j) - 2.0 * b[j] + y2;
    if (r < best_risk) {
      best_risk = r;
      best = j;
    }
  }
  Eigen::VectorXd wgt = Eigen::VectorXd::Zero(m);
  wgt[best] = 1.0;

  // Lipschitz constant of the gradient via a few power iterations.
  Eigen::VectorXd pv = Eigen::VectorXd::Ones(m) / std::sqrt(static_cast<double>(m));
  double lip = 1.0;
  for (int it = 0; it < 50; ++it) {
    pv = G * pv;
    const double norm = pv.norm();
    if (norm <= 0) break;
    pv /= norm;
    lip = norm;
  }
  double step = lip > 0 ? 1.0 / (2.0 * lip) : 1.0;

  double current = risk(wgt);
  for (int it = 0; it < 20000; ++it) {
    const Eigen::VectorXd grad = 2.0 * (G * wgt - b);
    Eigen::VectorXd next = project_to_simplex(wgt - step * grad);
    double next_risk = risk(next);
    int backtrack = 0;
    while (next_risk > current && backtrack++ < 60) {
      step *= 0.5;
      next = project_to_simplex(wgt - step * grad);
      next_risk = risk(next);
    }
    if (next_risk > current) break;  // no descent direction left at this scale
    const double move = (next - wgt).cwiseAbs().maxCoeff();
    wgt = next;
    current = next_risk;
    if (move < 1e-13) break;
  }
  const double total = wgt.sum();
  if (total > 0) wgt /= total;
  return wgt;
}

// ---------------------------------------------------------------------------
// Linear-family fitters
// ---------------------------------------------------------------------------

namespace {

struct AffineFit {
  double intercept = 0.0;
  Eigen::VectorXd coef;
  std::vector<std::string> notes;
};

AffineFit fit_linear_minnorm(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                             const Eigen::VectorXd& w) {
  const int n = static_cast<int>(X.rows());
  const int p = static_cast<int>(X.cols());
  Eigen::MatrixXd A(n, p + 1);
  A.leftCols(p) = X;
  A.col(p).setOnes();
  const Eigen::VectorXd sw = w.array().sqrt();
  const Eigen::MatrixXd Aw = A.array().colwise() * sw.array();
  const Eigen::VectorXd yw = y.array() * sw.array();
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(Aw);
  AffineFit fit;
  const Eigen::VectorXd beta = cod.solve(yw);
  fit.coef = beta.head(p);
  fit.intercept = beta[p];
  if (cod.rank() < p + 1) fit.notes.push_back("rank_deficient_min_norm");
  return fit;
}

// Coordinate descent for the elastic net on a standardized design:
// (1/2n) sum_i w_i (y_i - z_i'beta)^2 + lambda (alpha |beta|_1
//   + (1-alpha) |beta|_2^2 / 2),
// iterated to max coefficient change <= kCoordTol.
Eigen::VectorXd coordinate_descent(const Eigen::MatrixXd& Z, const Eigen::VectorXd& yc,
                                   const Eigen::VectorXd& w, double lambda,
                                   double alpha, Eigen::VectorXd beta) {
  const int n = static_cast<int>(Z.rows());
  const int p = static_cast<int>(Z.cols());
  Eigen::VectorXd znorm(p);
  for (int j = 0; j < p; ++j)
    znorm[j] = (w.array() * Z.col(j).array().square()).sum() / n;
  Eigen::VectorXd residual = yc - Z * beta;
  const double l1 = lambda * alpha;
  const double l2 = lambda * (1.0 - alpha);
  for (int sweep = 0; sweep < 100000; ++sweep) {
    double max_change = 0.0;
    for (int j = 0; j < p; ++j) {
      if (znorm[j] <= 1e-12) continue;  // constant column; stays at zero
      const double rho =
          (w.array() * Z.col(j).array() * residual.array()).sum() / n +
          znorm[j] * beta[j];
      double next;
      if (rho > l1) next = (rho - l1) / (znorm[j] + l2);
      else if (rho < -l1) next = (rho + l1) / (znorm[j] + l2);
      else next = 0.0;
      const double change = next - beta[j];
      if (change != 0.0) {
        residual -= change * Z.col(j);
        beta[j] = next;
        max_change = std::max(max_change, std::abs(change));
      }
    }
    if (max_change <= kCoordTol) break;
  }
  return beta;
}

struct PenalizedContext {
  Standardizer std;
  Eigen::MatrixXd Z;     // standardized design
  Eigen::VectorXd yc;    // centered target
  double y_center = 0.0;
  Eigen::VectorXd w;
};

PenalizedContext make_penalized_context(const Eigen::MatrixXd& X,
                                        const Eigen::VectorXd& y,
                                        const Eigen::VectorXd& w) {
  PenalizedContext ctx;
  ctx.w = w;
  ctx.std.fit(X, w);
  ctx.Z = ctx.std.transform(X);
  ctx.y_center = (w.array() * y.array()).sum() / static_cast<double>(y.size());
  ctx.yc = y.array() - ctx.y_center;
  return ctx;
}

AffineFit destandardize(const PenalizedContext& ctx, const Eigen::VectorXd& beta_std) {
  AffineFit fit;
  fit.coef = beta_std.array() / ctx.std.scale.array();
  fit.intercept = ctx.y_center - fit.coef.dot(ctx.std.center);
  return fit;
}

std::vector<double> lambda_grid(const PenalizedContext& ctx, double alpha) {
  const int n = static_cast<int>(ctx.Z.rows());
  double lmax = 0.0;
  for (int j = 0; j < ctx.Z.cols(); ++j) {
    const double g =
        std::abs((ctx.w.array() * ctx.Z.col(j).array() * ctx.yc.array()).sum() / n);
    lmax = std::max(lmax, g);
  }
  lmax /= std::max(alpha, 1e-3);
  if (lmax <= 0) lmax = 1.0;
  std::vector<double> grid(kLambdaGridSize);
  for (int i = 0; i < kLambdaGridSize; ++i)
    grid[static_cast<std::size_t>(i)] =
        lmax * std::pow(1e-3, static_cast<double>(i) / (kLambdaGridSize - 1));
  return grid;  // descending
}

Eigen::VectorXd ridge_solve(const PenalizedContext& ctx, double lambda) {
  const int n = static_cast<int>(ctx.Z.rows());
  const int p = static_cast<int>(ctx.Z.cols());
  const Eigen::MatrixXd Zw = ctx.Z.array().colwise() * ctx.w.array();
  Eigen::MatrixXd A = (Zw.transpose() * ctx.Z) / n;
  A.diagonal().array() += lambda;
  const Eigen::VectorXd rhs = (Zw.transpose() * ctx.yc) / n;
  (void)p;
  return A.ldlt().solve(rhs);
}

// V-fold CV over the descending lambda grid with warm starts; ties go to the
// larger (sparser) lambda. Returns the selected lambda.
double select_lambda_cv(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                        const Eigen::VectorXd& w, double alpha, bool ridge_path,
                        int v_folds, std::uint64_t seed) {
  const int n = static_cast<int>(X.rows());
  const int folds = std::min(v_folds, n);
  if (folds < 2) return 0.0;
  const PenalizedContext full = make_penalized_context(X, y, w);
  const std::vector<double> grid = lambda_grid(full, alpha);
  std::vector<double> cv_err(grid.size(), 0.0);

  const std::vector<int> fold_of = cv_fold_ids(n, folds, derive_seed(seed, 0x1a0bda));
  for (int v = 0; v < folds; ++v) {
    std::vector<int> train, val;
    for (int i = 0; i < n; ++i) (fold_of[static_cast<std::size_t>(i)] == v ? val : train).push_back(i);
    Eigen::MatrixXd Xt(train.size(), X.cols());
    Eigen::VectorXd yt(train.size()), wt(train.size());
    for (std::size_t r = 0; r < train.size(); ++r) {
      Xt.row(static_cast<int>(r)) = X.row(train[r]);
      yt[static_cast<int>(r)] = y[train[r]];
      wt[static_cast<int>(r)] = w[train[r]];
    }
    const PenalizedContext ctx = make_penalized_context(Xt, yt, wt * (static_cast<double>(train.size()) / wt.sum()));
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(X.cols());
    for (std::size_t g = 0; g < grid.size(); ++g) {
      beta = ridge_path ? ridge_solve(ctx, grid[g])
                        : coordinate_descent(ctx.Z, ctx.yc, ctx.w, grid[g], alpha, beta);
      const AffineFit fit = destandardize(ctx, beta);
      for (int i : val) {
        const double pred = fit.coef.dot(X.row(i)) + fit.intercept;
        cv_err[g] += w[i] * (y[i] - pred) * (y[i] - pred);
      }
    }
  }
  std::size_t best = 0;
  for (std::size_t g = 1; g < grid.size(); ++g)
    if (cv_err[g] < cv_err[best]) best = g;  // strict: ties keep larger lambda
  return grid[best];
}

// IRLS for logistic regression on the standardized design. ridge > 0 adds an
// l2 penalty (intercept unpenalized) and is used as the separation fallback.
struct LogisticFitResult {
  Eigen::VectorXd beta;  // [coef..., intercept] on the standardized scale
  bool converged = false;
  bool exploded = false;
};

LogisticFitResult irls_logistic(const Eigen::MatrixXd& Z, const Eigen::VectorXd& y,
                                const Eigen::VectorXd& w, double ridge) {
  const int n = static_cast<int>(Z.rows());
  const int p = static_cast<int>(Z.cols());
  Eigen::MatrixXd A(n, p + 1);
  A.leftCols(p) = Z;
  A.col(p).setOnes();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p + 1);
  const double ybar = std::min(std::max((w.array() * y.array()).sum() / n, 1e-12), 1.0 - 1e-12);
  beta[p] = std::log(ybar / (1.0 - ybar));
  LogisticFitResult result;
  for (int iter = 0; iter < 100; ++iter) {
    const Eigen::VectorXd eta = A * beta;
    Eigen::VectorXd mu(n), irls_w(n);
    for (int i = 0; i < n; ++i) {
      mu[i] = expit(eta[i]);
      irls_w[i] = std::max(w[i] * mu[i] * (1.0 - mu[i]), 1e-12);
    }
    Eigen::VectorXd grad = A.transpose() * (w.array() * (y - mu).array()).matrix() / n;
    if (ridge > 0) grad.head(p) -= ridge * beta.head(p);
    if (!grad.allFinite() || !beta.allFinite()) {
      result.exploded = true;
      break;
    }
    if (grad.cwiseAbs().maxCoeff() <= kScoreTol) {
      result.converged = true;
      break;
    }
    Eigen::MatrixXd H = A.transpose() * (A.array().colwise() * irls_w.array()).matrix() / n;
    if (ridge > 0) H.diagonal().head(p).array() += ridge;
    const Eigen::VectorXd delta = H.ldlt().solve(grad);
    if (!delta.allFinite()) {
      result.exploded = true;
      break;
    }
    beta += delta;
    // On standardized features a slope this large means (near-)separation:
    // the unpenalized likelihood has no interior optimum there.
    const double runaway = ridge > 0 ? 1e6 : 30.0;
    if (beta.head(p).cwiseAbs().maxCoeff() > runaway) {
      result.exploded = true;
      break;
    }
  }
  result.beta = beta;
  return result;
}

// Proximal Newton for the penalized logistic: IRLS quadratic approximation
// with an elastic-net coordinate step on the working response. Design and
// working response are re-centered under the IRLS weights each outer pass so
// the intercept stays unpenalized.
Eigen::VectorXd logistic_elastic_net(const Eigen::MatrixXd& Z, const Eigen::VectorXd& y,
                                     const Eigen::VectorXd& w, double lambda,
                                     double alpha, Eigen::VectorXd beta_full) {
  const int n = static_cast<int>(Z.rows());
  const int p = static_cast<int>(Z.cols());
  if (beta_full.size() != p + 1) beta_full = Eigen::VectorXd::Zero(p + 1);
  for (int outer = 0; outer < 100; ++outer) {
    const Eigen::VectorXd eta = (Z * beta_full.head(p)).array() + beta_full[p];
    Eigen::VectorXd mu(n), ww(n), work(n);
    for (int i = 0; i < n; ++i) {
      mu[i] = expit(eta[i]);
      const double v = std::max(mu[i] * (1.0 - mu[i]), 1e-6);
      ww[i] = w[i] * v;
      work[i] = eta[i] + (y[i] - mu[i]) / v;
    }
    const Eigen::VectorXd ww_norm = ww * (static_cast<double>(n) / ww.sum());
    const Eigen::VectorXd z_center = (Z.transpose() * ww_norm) / n;
    const double work_center = (ww_norm.array() * work.array()).sum() / n;
    const Eigen::MatrixXd Zc = Z.rowwise() - z_center.transpose();
    const Eigen::VectorXd beta_old = beta_full;
    const Eigen::VectorXd beta_new =
        coordinate_descent(Zc, (work.array() - work_center).matrix(), ww_norm,
                           lambda, alpha, beta_full.head(p));
    beta_full.head(p) = beta_new;
    beta_full[p] = work_center - beta_new.dot(z_center);
    if ((beta_full - beta_old).cwiseAbs().maxCoeff() <= kCoordTol) break;
  }
  return beta_full;
}

double select_lambda_cv_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                 const Eigen::VectorXd& w, double alpha, int v_folds,
                                 std::uint64_t seed) {
  const int n = static_cast<int>(X.rows());
  const int folds = std::min(v_folds, n);
  if (folds < 2) return 0.0;
  const PenalizedContext full = make_penalized_context(X, y, w);
  const std::vector<double> grid = lambda_grid(full, alpha);
  std::vector<double> cv_err(grid.size(), 0.0);
  const std::vector<int> fold_of = cv_fold_ids(n, folds, derive_seed(seed, 0x1a0bdb));
  for (int v = 0; v < folds; ++v) {
    std::vector<int> train, val;
    for (int i = 0; i < n; ++i) (fold_of[static_cast<std::size_t>(i)] == v ? val : train).push_back(i);
    Eigen::MatrixXd Xt(train.size(), X.cols());
    Eigen::VectorXd yt(train.size()), wt(train.size());
    for (std::size_t r = 0; r < train.size(); ++r) {
      Xt.row(static_cast<int>(r)) = X.row(train[r]);
      yt[static_cast<int>(r)] = y[train[r]];
      wt[static_cast<int>(r)] = w[train[r]];
    }
    Standardizer std_t;
    const Eigen::VectorXd wt_norm = wt * (static_cast<double>(train.size()) / wt.sum());
    std_t.fit(Xt, wt_norm);
    const Eigen::MatrixXd Zt = std_t.transform(Xt);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(X.cols() + 1);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      beta = logistic_elastic_net(Zt, yt, wt_norm, grid[g], alpha, beta);
      for (int i : val) {
        const Eigen::VectorXd zi =
            (X.row(i).transpose() - std_t.center).array() / std_t.scale.array();
        const double pred = expit(beta.head(X.cols()).dot(zi) + beta[X.cols()]);
        cv_err[g] += w[i] * (y[i] - pred) * (y[i] - pred);
      }
    }
  }
  std::size_t best = 0;
  for (std::size_t g = 1; g < grid.size(); ++g)
    if (cv_err[g] < cv_err[best]) best = g;
  return grid[best];
}

// ---------------------------------------------------------------------------
// Regression tree
// ---------------------------------------------------------------------------

struct TreeBuilder {
  const Eigen::MatrixXd& X;
  const Eigen::VectorXd& y;
  int max_depth;
  int min_leaf;
  std::vector<TreeNode> nodes;

  int build(std::vector<int> rows, int depth) {
    const int id = static_cast<int>(nodes.size());
    nodes.push_back({});
    const double n = static_cast<double>(rows.size());
    double sum = 0.0;
    for (int r : rows) sum += y[r];
    const double mean = sum / n;
    nodes[static_cast<std::size_t>(id)].value = mean;
    if (depth >= max_depth || static_cast<int>(rows.size()) < 2 * min_leaf)
      return id;

    double parent_sse = 0.0;
    for (int r : rows) parent_sse += (y[r] - mean) * (y[r] - mean);

    int best_feature = -1;
    double best_threshold = 0.0;
    double best_gain = 1e-12;  // require a strictly positive reduction
    std::vector<std::pair<double, double>> xy(rows.size());
    for (int j = 0; j < X.cols(); ++j) {
      for (std::size_t r = 0; r < rows.size(); ++r)
        xy[r] = {X(rows[r], j), y[rows[r]] - mean};
      std::sort(xy.begin(), xy.end());
      double left_sum = 0.0, left_sq = 0.0;
      double total_sum = 0.0, total_sq = 0.0;
      for (const auto& p : xy) {
        total_sum += p.second;
        total_sq += p.second * p.second;
      }
      for (std::size_t r = 0; r + 1 < xy.size(); ++r) {
        left_sum += xy[r].second;
        left_sq += xy[r].second * xy[r].second;
        if (xy[r].first == xy[r + 1].first) continue;  // split only between distinct values
        const int n_left = static_cast<int>(r + 1);
        const int n_right = static_cast<int>(xy.size()) - n_left;
        if (n_left < min_leaf || n_right < min_leaf) continue;
        const double right_sum = total_sum - left_sum;
        const double right_sq = total_sq - left_sq;
        const double sse_left = left_sq - left_sum * left_sum / n_left;
        const double sse_right = right_sq - right_sum * right_sum / n_right;
        const double gain = parent_sse - sse_left - sse_right;
        if (gain > best_gain) {  // strict: first (lowest j, lowest threshold) wins ties
          best_gain = gain;
          best_feature = j;
          best_threshold = 0.5 * (xy[r].first + xy[r + 1].first);
        }
      }
    }
    if (best_feature < 0) return id;

    std::vector<int> left_rows, right_rows;
    for (int r : rows)
      (X(r, best_feature) <= best_threshold ? left_rows : right_rows).push_back(r);
    rows.clear();
    rows.shrink_to_fit();
    nodes[static_cast<std::size_t>(id)].feature = best_feature;
    nodes[static_cast<std::size_t>(id)].threshold = best_threshold;
    const int left = build(std::move(left_rows), depth + 1);
    nodes[static_cast<std::size_t>(id)].left = left;
    const int right = build(std::move(right_rows), depth + 1);
    nodes[static_cast<std::size_t>(id)].right = right;
    return id;
  }
};

TreeImpl fit_tree_impl(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                       int max_depth, int min_leaf) {
  TreeBuilder builder{X, y, max_depth, min_leaf, {}};
  std::vector<int> rows(static_cast<std::size_t>(X.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  builder.build(std::move(rows), 0);
  TreeImpl impl;
  impl.nodes = std::move(builder.nodes);
  return impl;
}

}  // namespace

// ---------------------------------------------------------------------------
// fit() dispatch
// ---------------------------------------------------------------------------

namespace {

std::shared_ptr<FittedModel::State> make_state(const LearnerSpec& spec,
                                               ResolvedMap map, int width,
                                               bool probability,
                                               std::shared_ptr<const ModelImpl> model,
                                               std::vector<std::string> notes) {
  auto state = std::make_shared<FittedModel::State>();
  state->spec = spec;
  state->map = std::move(map);
  state->model = std::move(model);
  state->input_width = width;
  state->probability = probability;
  state->notes = std::move(notes);
  return state;
}

}  // namespace

FittedModel fit(const LearnerSpec& spec, const Eigen::MatrixXd& features,
                const Eigen::VectorXd& target, const Eigen::VectorXd* weights,
                std::uint64_t seed, bool probability_target,
                const std::vector<std::string>& column_names) {
  validate(spec);
  const int n = static_cast<int>(features.rows());
  const int raw_width = static_cast<int>(features.cols());
  if (n < 1) throw ValidationError("cannot fit on empty data");
  if (target.size() != n)
    throw ValidationError("target length does not match feature rows");
  if (!features.allFinite() || !target.allFinite())
    throw ValidationError("non-finite values in training data");

  const Eigen::VectorXd w = normalized_weights(weights, n);
  std::vector<std::string> notes;

  const bool logistic_family = spec.kind == LearnerKind::Logistic ||
                               spec.kind == LearnerKind::LogisticElasticNet;
  const bool probability = probability_target || logistic_family;
  if (logistic_family &&
      ((target.array() < 0).any() || (target.array() > 1).any()))
    throw ValidationError("logistic learners require targets in [0,1]");

  // Stack members see the raw features; everything else sees the mapped design.
  if (spec.kind == LearnerKind::Stack) {
    std::vector<int> dropped;
    const Eigen::VectorXd wgts = cv_stack_weights(
        spec.members, features, target, spec.cv_folds, derive_seed(seed, 0x57ac),
        probability_target, column_names, &dropped);
    auto impl = std::make_shared<StackImpl>();
    impl->weights = wgts;
    for (std::size_t b = 0; b < spec.members.size(); ++b) {
      if (std::find(dropped.begin(), dropped.end(), static_cast<int>(b)) != dropped.end()) {
        notes.push_back("stack_member_dropped=" + std::to_string(b));
        impl->members.push_back(FittedModel());
        impl->weights[static_cast<int>(b)] = 0.0;
        continue;
      }
      impl->members.push_back(fit(spec.members[b], features, target, weights,
                                  derive_seed(seed, 0xF1F, b), probability_target,
                                  column_names));
    }
    ResolvedMap identity = resolve_map(FeatureMap{}, raw_width, column_names);
    return FittedModel(make_state(spec, std::move(identity), raw_width, probability,
                                  std::move(impl), std::move(notes)));
  }

  ResolvedMap map = resolve_map(spec.feature_map, raw_width, column_names);
  const Eigen::MatrixXd design = map.apply(features);
  if (!design.allFinite())
    throw ValidationError("feature map produced non-finite values");

  // Constant target: every kind degenerates to the constant predictor.
  const double t_min = target.minCoeff();
  const double t_max = target.maxCoeff();
  if (t_min == t_max) {
    notes.push_back("degenerate_constant_target");
    return FittedModel(make_state(spec, std::move(map), raw_width, probability,
                                  std::make_shared<ConstantImpl>(t_min), std::move(notes)));
  }

  std::shared_ptr<const ModelImpl> impl;
  switch (spec.kind) {
    case LearnerKind::Mean: {
      const double mean = (w.array() * target.array()).sum() / n;
      impl = std::make_shared<ConstantImpl>(mean);
      break;
    }
    case LearnerKind::Stratum: {
      auto stratum = std::make_shared<StratumImpl>();
      std::map<std::vector<double>, std::pair<double, double>> acc;  // sum_w, sum_wy
      std::vector<double> key(static_cast<std::size_t>(design.cols()));
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < design.cols(); ++j)
          key[static_cast<std::size_t>(j)] = design(i, j);
        auto& slot = acc[key];
        slot.first += w[i];
        slot.second += w[i] * target[i];
      }
      for (const auto& [k, v] : acc)
        if (v.first > 0) stratum->table[k] = v.second / v.first;
      stratum->fallback = (w.array() * target.array()).sum() / n;
      impl = stratum;
      break;
    }
    case LearnerKind::Linear: {
      AffineFit fit = fit_linear_minnorm(design, target, w);
      notes.insert(notes.end(), fit.notes.begin(), fit.notes.end());
      impl = std::make_shared<AffineImpl>(fit.intercept, std::move(fit.coef), false);
      break;
    }
    case LearnerKind::Ridge:
    case LearnerKind::ElasticNet: {
      const bool ridge = spec.kind == LearnerKind::Ridge;
      const double alpha = ridge ? 0.0 : spec.alpha;
      double lambda;
      if (spec.lambda) {
        lambda = *spec.lambda;
      } else {
        lambda = select_lambda_cv(design, target, w, alpha, ridge, spec.cv_folds, seed);
        notes.push_back("lambda_cv=" + std::to_string(lambda));
      }
      const PenalizedContext ctx = make_penalized_context(design, target, w);
      Eigen::VectorXd beta;
      if (ridge && lambda > 0) {
        beta = ridge_solve(ctx, lambda);
      } else {
        beta = coordinate_descent(ctx.Z, ctx.yc, ctx.w, lambda, alpha,
                                  Eigen::VectorXd::Zero(design.cols()));
      }
      AffineFit fit = destandardize(ctx, beta);
      impl = std::make_shared<AffineImpl>(fit.intercept, std::move(fit.coef), false);
      break;
    }
    case LearnerKind::Logistic: {
      Standardizer std_x;
      std_x.fit(design, w);
      const Eigen::MatrixXd Z = std_x.transform(design);
      LogisticFitResult res = irls_logistic(Z, target, w, 0.0);
      if (!res.converged || res.exploded) {
        res = irls_logistic(Z, target, w, kFallbackRidge);
        notes.push_back("ridge_stabilized");
      }
      const int p = static_cast<int>(design.cols());
      Eigen::VectorXd coef = res.beta.head(p).array() / std_x.scale.array();
      const double intercept = res.beta[p] - coef.dot(std_x.center);
      impl = std::make_shared<AffineImpl>(intercept, std::move(coef), true);
      break;
    }
    case LearnerKind::LogisticElasticNet: {
      double lambda;
      if (spec.lambda) {
        lambda = *spec.lambda;
      } else {
        lambda = select_lambda_cv_logistic(design, target, w, spec.alpha,
                                           spec.cv_folds, seed);
        notes.push_back("lambda_cv=" + std::to_string(lambda));
      }
      Standardizer std_x;
      std_x.fit(design, w);
      const Eigen::MatrixXd Z = std_x.transform(design);
      const Eigen::VectorXd beta = logistic_elastic_net(
          Z, target, w, lambda, spec.alpha, Eigen::VectorXd());
      const int p = static_cast<int>(design.cols());
      Eigen::VectorXd coef = beta.head(p).array() / std_x.scale.array();
      const double intercept = beta[p] - coef.dot(std_x.center);
      impl = std::make_shared<AffineImpl>(intercept, std::move(coef), true);
      break;
    }
    case LearnerKind::Tree: {
      // Weighted fits materialize nothing extra; the builder works on the
      // unweighted rows (bagging passes resampled rows instead of weights).
      if (weights != nullptr)
        throw ValidationError("tree learner does not accept weights; use bagging");
      auto tree = std::make_shared<TreeImpl>(
          fit_tree_impl(design, target, spec.max_depth, spec.min_leaf));
      impl = tree;
      break;
    }
    case LearnerKind::BaggedTrees: {
      if (weights != nullptr)
        throw ValidationError("bagged trees do not accept weights");
      auto forest = std::make_shared<ForestImpl>();
      for (int b = 0; b < spec.n_bags; ++b) {
        Rng rng(derive_seed(seed, 0xBA6, static_cast<std::uint64_t>(b)));
        Eigen::MatrixXd Xb(n, design.cols());
        Eigen::VectorXd yb(n);
        for (int i = 0; i < n; ++i) {
          const int r = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
          Xb.row(i) = design.row(r);
          yb[i] = target[r];
        }
        forest->trees.push_back(fit_tree_impl(Xb, yb, spec.max_depth, spec.min_leaf));
      }
      impl = forest;
      break;
    }
    case LearnerKind::Stack:
      throw Error("unreachable");
  }

  return FittedModel(make_state(spec, std::move(map), raw_width, probability,
                                std::move(impl), std::move(notes)));
}

Eigen::VectorXd cv_stack_weights(const std::vector<LearnerSpec>& members,
                                 const Eigen::MatrixXd& features,
                                 const Eigen::VectorXd& target, int v_folds,
                                 std::uint64_t seed, bool probability_target,
                                 const std::vector<std::string>& column_names,
                                 std::vector<int>* dropped) {
  if (members.empty()) throw ValidationError("stack requires members");
  const int n = static_cast<int>(features.rows());
  const int folds = std::min(v_folds, n);
  if (folds < 2)
    throw ValidationError("stacking needs at least 2 rows for cross-validation");
  const int m = static_cast<int>(members.size());

  if (m == 1) {
    if (dropped) dropped->clear();
    return Eigen::VectorXd::Ones(1);
  }

  const std::vector<int> fold_of = cv_fold_ids(n, folds, derive_seed(seed, 0xCF01));
  Eigen::MatrixXd cv_preds = Eigen::MatrixXd::Zero(n, m);
  std::vector<int> fail_count(static_cast<std::size_t>(m), 0);

  for (int v = 0; v < folds; ++v) {
    std::vector<int> train, val;
    for (int i = 0; i < n; ++i)
      (fold_of[static_cast<std::size_t>(i)] == v ? val : train).push_back(i);
    Eigen::MatrixXd Xt(train.size(), features.cols());
    Eigen::VectorXd yt(train.size());
    for (std::size_t r = 0; r < train.size(); ++r) {
      Xt.row(static_cast<int>(r)) = features.row(train[r]);
      yt[static_cast<int>(r)] = target[train[r]];
    }
    Eigen::MatrixXd Xv(val.size(), features.cols());
    for (std::size_t r = 0; r < val.size(); ++r)
      Xv.row(static_cast<int>(r)) = features.row(val[r]);
    const double train_mean = yt.mean();

    for (int b = 0; b < m; ++b) {
      Eigen::VectorXd preds;
      try {
        const FittedModel model =
            fit(members[static_cast<std::size_t>(b)], Xt, yt, nullptr,
                derive_seed(seed, 0xCF02, static_cast<std::uint64_t>(v),
                            static_cast<std::uint64_t>(b)),
                probability_target, column_names);
        preds = model.predict(Xv);
      } catch (const Error&) {
        // Failed fold: fall back to the training mean for these rows; the
        // member is dropped entirely only if it fails everywhere.
        preds = Eigen::VectorXd::Constant(static_cast<int>(val.size()), train_mean);
        ++fail_count[static_cast<std::size_t>(b)];
      }
      for (std::size_t r = 0; r < val.size(); ++r)
        cv_preds(val[r], b) = preds[static_cast<int>(r)];
    }
  }

  std::vector<int> drop;
  std::vector<int> keep;
  for (int b = 0; b < m; ++b) {
    if (fail_count[static_cast<std::size_t>(b)] >= folds) drop.push_back(b);
    else keep.push_back(b);
  }
  if (keep.empty()) throw EstimationError("all stack members failed cross-validation");
  if (dropped) *dropped = drop;

  Eigen::MatrixXd Z(n, static_cast<int>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c)
    Z.col(static_cast<int>(c)) = cv_preds.col(keep[c]);
  const Eigen::VectorXd kept_w = simplex_ls_weights(Z, target);

  Eigen::VectorXd weights = Eigen::VectorXd::Zero(m);
  for (std::size_t c = 0; c < keep.size(); ++c)
    weights[keep[c]] = kept_w[static_cast<int>(c)];
  return weights;
}

}  // namespace didmean
