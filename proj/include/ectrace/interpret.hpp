// SPDX-License-Identifier: Apache-2.0
//
// 2D PCA of embeddings and hidden states, a linear parity-separation score
// for such projections, and input-gradient saliency.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ectrace/ffn.hpp"
#include "ectrace/tokenizer.hpp"
#include "ectrace/transformer.hpp"

namespace ectrace {

class InterpretError : public std::runtime_error {
 public:
  enum class Kind { TooFewRows, DegenerateClass };

  InterpretError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct Projection2D {
  std::vector<std::string> labels;
  std::vector<std::array<double, 2>> coords;
  std::array<double, 2> explained{0.0, 0.0};  // fractions of total variance
  std::array<std::vector<double>, 2> axes;    // unit principal directions
  bool degenerate = false;                    // covariance rank < 2
  // residue annotations, parallel to labels; nullopt when not applicable
  std::vector<std::optional<int>> mod2, mod3, mod4;
};

using Matrix = std::vector<std::vector<double>>;

/// Eigenpairs of a symmetric matrix by cyclic Jacobi rotations, sorted by
/// descending eigenvalue. Column k of the returned vectors is eigenvector k.
inline std::pair<std::vector<double>, Matrix> jacobi_eigen(Matrix a, double tol = 1e-10, int max_sweeps = 100) {
  const std::size_t n = a.size();
  Matrix v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  double fro = 0.0;
  for (const auto& r : a)
    for (double x : r) fro += x * x;
  fro = std::sqrt(fro);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += 2.0 * a[i][j] * a[i][j];
    if (std::sqrt(off) <= tol * std::max(fro, 1e-300)) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a[p][q] == 0.0) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return a[x][x] > a[y][y]; });
  std::vector<double> vals(n);
  Matrix vecs(n, std::vector<double>(n));
  for (std::size_t k = 0; k < n; ++k) {
    vals[k] = a[order[k]][order[k]];
    for (std::size_t i = 0; i < n; ++i) vecs[i][k] = v[i][order[k]];
  }
  return {vals, vecs};
}

/// Centers the rows and projects them on the top two covariance
/// eigenvectors. Each axis is flipped so its largest-magnitude loading is
/// positive.
inline Projection2D pca2d(const Matrix& rows, std::vector<std::string> labels = {}) {
  if (rows.size() < 3) throw InterpretError(InterpretError::Kind::TooFewRows, "PCA needs at least 3 rows");
  const std::size_t n = rows.size(), d = rows.front().size();
  if (d < 1) throw InterpretError(InterpretError::Kind::TooFewRows, "PCA needs at least one column");
  std::vector<double> mean(d, 0.0);
  for (const auto& r : rows) {
    if (r.size() != d) throw std::invalid_argument("ragged rows");
    for (std::size_t j = 0; j < d; ++j) mean[j] += r[j];
  }
  for (auto& m : mean) m /= static_cast<double>(n);
  Matrix centered(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centered[i][j] = rows[i][j] - mean[j];
  Matrix cov(d, std::vector<double>(d, 0.0));
  for (const auto& r : centered)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) cov[a][b] += r[a] * r[b];
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      cov[a][b] /= static_cast<double>(n - 1);
      cov[b][a] = cov[a][b];
    }
  }
  auto [vals, vecs] = jacobi_eigen(cov);
  double total = 0.0;
  for (double v : vals) total += std::max(v, 0.0);

  Projection2D out;
  out.labels = labels.empty() ? std::vector<std::string>(n) : std::move(labels);
  if (out.labels.size() != n) throw std::invalid_argument("label count does not match row count");
  const double rank_tol = 1e-12 * std::max(total, 1e-300);
  for (std::size_t k = 0; k < 2; ++k) {
    std::vector<double> axis(d, 0.0);
    const bool present = k < d && vals[k] > rank_tol;
    if (present) {
      std::size_t big = 0;
      for (std::size_t i = 0; i < d; ++i) {
        axis[i] = vecs[i][k];
        if (std::abs(axis[i]) > std::abs(axis[big])) big = i;
      }
      if (axis[big] < 0)
        for (auto& x : axis) x = -x;
      out.explained[k] = total > 0 ? vals[k] / total : 0.0;
    } else {
      out.degenerate = true;
    }
    out.axes[k] = std::move(axis);
  }
  out.coords.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += centered[i][j] * out.axes[k][j];
      out.coords[i][k] = s;
    }
  }
  return out;
}

inline int residue(int v, int m) { return ((v % m) + m) % m; }

/// PCA of the embedding rows for "+", "-" and the magnitudes 0..19. Integer
/// tokens carry their residues mod 2, 3 and 4.
template <class T>
Projection2D embedding_tokens(const TransformerModel<T>& m, const Vocab& vocab = Vocab{}) {
  std::vector<int> ids = {Vocab::kPlus, Vocab::kMinus};
  for (int n = 0; n <= kMaxMagnitude; ++n) ids.push_back(n);
  Matrix rows;
  std::vector<std::string> labels;
  const std::size_t d = m.tok_emb.cols();
  for (int id : ids) {
    rows.emplace_back(m.tok_emb.data() + static_cast<std::size_t>(id) * d,
                      m.tok_emb.data() + static_cast<std::size_t>(id + 1) * d);
    labels.push_back(vocab.token(id));
  }
  auto proj = pca2d(rows, labels);
  for (int id : ids) {
    const bool num = Vocab::is_magnitude(id);
    proj.mod2.push_back(num ? std::optional<int>(residue(id, 2)) : std::nullopt);
    proj.mod3.push_back(num ? std::optional<int>(residue(id, 3)) : std::nullopt);
    proj.mod4.push_back(num ? std::optional<int>(residue(id, 4)) : std::nullopt);
  }
  return proj;
}

/// PCA of decoder hidden states, one point per record, annotated by the
/// record's true label (a_p) mod 2 and mod 4.
template <class T>
Projection2D decoder_hidden_pca(const TransformerModel<T>& m, std::span<const TokenSeq> seqs,
                                std::span<const int> true_values, std::vector<std::string> ids) {
  if (!m.has_decoder()) throw ModelError(ModelError::Kind::ConfigMismatch, "model has no decoder");
  if (seqs.size() != true_values.size()) throw std::invalid_argument("one label per record required");
  Matrix rows;
  for (std::size_t s = 0; s < seqs.size(); s += 256) {
    const auto n = std::min<std::size_t>(256, seqs.size() - s);
    ad::Graph<T> g(false);
    const auto b = make_batch(seqs.subspan(s, n));
    auto h = decoder_forward(g, m, encoder_forward(g, m, b), b);
    const std::size_t d = h.cols();
    for (std::size_t i = 0; i < n; ++i) rows.emplace_back(h.data() + i * d, h.data() + (i + 1) * d);
  }
  auto proj = pca2d(rows, std::move(ids));
  for (int v : true_values) {
    proj.mod2.push_back(residue(v, 2));
    proj.mod3.push_back(residue(v, 3));
    proj.mod4.push_back(residue(v, 4));
  }
  return proj;
}

// ---------------------------------------------------------------------------
// Linear separability in the plane

namespace detail {

struct Separator {
  std::size_t correct = 0;
  double gap = -1.0;
  double angle = 0.0;
  double threshold = 0.0;
  bool positive_above = true;  // class 1 lies where projection > threshold
};

/// Candidate directions: midpoints between consecutive critical angles,
/// where two points swap order along the direction.
inline std::vector<double> candidate_angles(std::span<const std::array<double, 2>> pts) {
  std::vector<double> crit;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      const double dx = pts[j][0] - pts[i][0], dy = pts[j][1] - pts[i][1];
      if (dx == 0.0 && dy == 0.0) continue;
      double a = std::atan2(dy, dx) + std::numbers::pi / 2;
      a = std::fmod(a, std::numbers::pi);
      if (a < 0) a += std::numbers::pi;
      crit.push_back(a);
    }
  }
  std::sort(crit.begin(), crit.end());
  crit.erase(std::unique(crit.begin(), crit.end()), crit.end());
  std::vector<double> out;
  if (crit.empty()) return {0.0};
  for (std::size_t k = 0; k < crit.size(); ++k) {
    const double next = k + 1 < crit.size() ? crit[k + 1] : crit.front() + std::numbers::pi;
    out.push_back((crit[k] + next) / 2);
  }
  return out;
}

inline Separator best_separator(std::span<const std::array<double, 2>> pts, std::span<const int> cls) {
  Separator best;
  const std::size_t n = pts.size();
  std::vector<std::pair<double, int>> proj(n);
  for (double angle : candidate_angles(pts)) {
    const double ux = std::cos(angle), uy = std::sin(angle);
    for (std::size_t i = 0; i < n; ++i) proj[i] = {pts[i][0] * ux + pts[i][1] * uy, cls[i]};
    std::sort(proj.begin(), proj.end());
    std::size_t ones_total = 0;
    for (const auto& [_, c] : proj) ones_total += c == 1;
    // Threshold after the first k points; k = 0 puts every point above.
    std::size_t ones_below = 0;
    for (std::size_t k = 0; k <= n; ++k) {
      if (k > 0) ones_below += proj[k - 1].second == 1;
      if (k > 0 && k < n && proj[k].first == proj[k - 1].first) continue;
      const double lo = k > 0 ? proj[k - 1].first : -std::numeric_limits<double>::infinity();
      const double hi = k < n ? proj[k].first : std::numeric_limits<double>::infinity();
      const double gap = (k > 0 && k < n) ? hi - lo : 0.0;
      const double thr = k == 0 ? hi - 1.0 : (k == n ? lo + 1.0 : (lo + hi) / 2);
      const std::size_t zeros_below = k - ones_below;
      const std::size_t up = (ones_total - ones_below) + zeros_below;
      const std::size_t down = n - up;
      for (bool pos_above : {true, false}) {
        const std::size_t correct = pos_above ? up : down;
        if (correct > best.correct || (correct == best.correct && gap > best.gap)) {
          best = {correct, gap, angle, thr, pos_above};
        }
      }
    }
  }
  return best;
}

inline int classify_point(const Separator& s, const std::array<double, 2>& p) {
  const double v = p[0] * std::cos(s.angle) + p[1] * std::sin(s.angle);
  return (v > s.threshold) == s.positive_above ? 1 : 0;
}

}  // namespace detail

/// Training accuracy of the best line separating classes 0 and 1.
inline double best_linear_separator_accuracy(std::span<const std::array<double, 2>> pts, std::span<const int> cls) {
  if (pts.empty()) return 0.0;
  return static_cast<double>(detail::best_separator(pts, cls).correct) / static_cast<double>(pts.size());
}

/// Leave-one-out accuracy of the best linear separator between even and odd
/// points. Points without a mod-2 annotation are ignored.
inline double parity_separation_score(const Projection2D& proj) {
  std::vector<std::array<double, 2>> pts;
  std::vector<int> cls;
  for (std::size_t i = 0; i < proj.coords.size(); ++i) {
    if (i < proj.mod2.size() && proj.mod2[i]) {
      pts.push_back(proj.coords[i]);
      cls.push_back(*proj.mod2[i]);
    }
  }
  const auto ones = static_cast<std::size_t>(std::count(cls.begin(), cls.end(), 1));
  if (ones < 2 || cls.size() - ones < 2) {
    throw InterpretError(InterpretError::Kind::DegenerateClass, "parity score needs two points of each parity");
  }
  std::size_t hits = 0;
  std::vector<std::array<double, 2>> rest_pts;
  std::vector<int> rest_cls;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    rest_pts.clear();
    rest_cls.clear();
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (j == i) continue;
      rest_pts.push_back(pts[j]);
      rest_cls.push_back(cls[j]);
    }
    const auto sep = detail::best_separator(rest_pts, rest_cls);
    hits += detail::classify_point(sep, pts[i]) == cls[i];
  }
  return static_cast<double>(hits) / static_cast<double>(pts.size());
}

// ---------------------------------------------------------------------------
// Saliency

struct FeatureScore {
  std::string name;  // prime, "conductor" or "root_number"
  double score = 0.0;
};

namespace detail {

/// Sum over rows of the true-class logit. A single-logit head uses z for
/// class 1 and -z for class 0.
template <class T>
ad::Tensor<T> true_class_logit_sum(ad::Graph<T>& g, ad::Tensor<T> z, std::span<const int> labels) {
  ad::Tensor<T> pick(z.shape());
  const std::size_t c = z.cols();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (c == 1) {
      pick[i] = labels[i] == 1 ? T(1) : T(-1);
    } else {
      pick[i * c + static_cast<std::size_t>(labels[i])] = T(1);
    }
  }
  return ad::sum(g, ad::mul(g, z, pick));
}

}  // namespace detail

/// Mean |d logit_true / d input| per feature, summed over each prime's block.
template <class T>
std::vector<FeatureScore> saliency(const FFNModel<T>& m, const FeatureSpec& spec,
                                   const std::vector<std::vector<double>>& x, std::span<const int> labels) {
  if (x.size() != labels.size()) throw std::invalid_argument("one label per row required");
  const std::size_t w = spec.width();
  std::vector<double> col(w, 0.0);
  for (std::size_t s = 0; s < x.size(); s += 1024) {
    std::vector<std::size_t> pick;
    for (std::size_t i = s; i < std::min(x.size(), s + 1024); ++i) pick.push_back(i);
    auto in = to_tensor<T>(x, pick);
    in.set_requires_grad(true);
    ad::Graph<T> g;
    g.backward(detail::true_class_logit_sum(g, forward(g, m, in), labels.subspan(s, pick.size())));
    for (std::size_t i = 0; i < pick.size(); ++i)
      for (std::size_t j = 0; j < w; ++j) col[j] += std::abs(static_cast<double>(in.grad()[i * w + j]));
  }
  std::vector<FeatureScore> out;
  std::size_t at = 0;
  const auto widths = spec.block_widths();
  const double n = x.empty() ? 1.0 : static_cast<double>(x.size());
  for (std::size_t b = 0; b < widths.size(); ++b) {
    double sum = 0.0;
    for (std::size_t k = 0; k < widths[b]; ++k) sum += col[at++];
    out.push_back({std::to_string(spec.primes[b]), sum / n});
  }
  if (spec.conductor) out.push_back({"conductor", col[at++] / n});
  if (spec.root_number) out.push_back({"root_number", col[at++] / n});
  return out;
}

/// Transformer form: gradients with respect to the embedded input, summed
/// over the width and over the sign and magnitude tokens of each value.
/// `primes` names the values in sequence order.
template <class T>
std::vector<FeatureScore> saliency(const TransformerModel<T>& m, std::span<const TokenSeq> seqs,
                                   std::span<const int> labels, std::span<const int> primes) {
  if (seqs.size() != labels.size()) throw std::invalid_argument("one label per sequence required");
  std::vector<double> per_value(primes.size(), 0.0);
  for (std::size_t s = 0; s < seqs.size(); s += 128) {
    const auto n = std::min<std::size_t>(128, seqs.size() - s);
    const auto b = make_batch(seqs.subspan(s, n));
    ad::Graph<T> g;
    auto x = embed(g, m, b);
    x.set_requires_grad(true);
    auto z = class_logits(g, m, readout_hidden(g, m, x, b));
    g.backward(detail::true_class_logit_sum(g, z, labels.subspan(s, n)));
    const std::size_t d = x.cols();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t v = 0; v < primes.size(); ++v) {
        for (std::size_t t = 2 * v; t < 2 * v + 2 && t < b.length; ++t) {
          const T* gr = x.grad().data() + (i * b.length + t) * d;
          for (std::size_t k = 0; k < d; ++k) per_value[v] += std::abs(static_cast<double>(gr[k]));
        }
      }
    }
  }
  std::vector<FeatureScore> out;
  const double n = seqs.empty() ? 1.0 : static_cast<double>(seqs.size());
  for (std::size_t v = 0; v < primes.size(); ++v) out.push_back({std::to_string(primes[v]), per_value[v] / n});
  return out;
}

// ---------------------------------------------------------------------------
// CSV emitters

namespace detail {

inline std::string num(double v) { return nlohmann::json(v).dump(); }
inline std::string opt(const std::optional<int>& v) { return v ? std::to_string(*v) : std::string(); }

}  // namespace detail

/// `token,x,y,mod2,mod3,mod4`; residue fields are empty for sign tokens.
inline void write_embedding_csv(std::ostream& out, const Projection2D& p) {
  out << "token,x,y,mod2,mod3,mod4\n";
  for (std::size_t i = 0; i < p.coords.size(); ++i) {
    out << p.labels[i] << ',' << detail::num(p.coords[i][0]) << ',' << detail::num(p.coords[i][1]) << ','
        << detail::opt(p.mod2[i]) << ',' << detail::opt(p.mod3[i]) << ',' << detail::opt(p.mod4[i]) << '\n';
  }
}

/// `id,x,y,label_mod2,label_mod4`.
inline void write_hidden_csv(std::ostream& out, const Projection2D& p) {
  out << "id,x,y,label_mod2,label_mod4\n";
  for (std::size_t i = 0; i < p.coords.size(); ++i) {
    out << p.labels[i] << ',' << detail::num(p.coords[i][0]) << ',' << detail::num(p.coords[i][1]) << ','
        << detail::opt(p.mod2[i]) << ',' << detail::opt(p.mod4[i]) << '\n';
  }
}

/// `prime,score`.
inline void write_saliency_csv(std::ostream& out, std::span<const FeatureScore> scores) {
  out << "prime,score\n";
  for (const auto& s : scores) out << s.name << ',' << detail::num(s.score) << '\n';
}

struct EmbeddingRow {
  std::string token;
  double x = 0, y = 0;
  std::optional<int> mod2, mod3, mod4;
};

/// Reads back the embedding CSV written above.
inline std::vector<EmbeddingRow> read_embedding_csv(std::istream& in) {
  std::string line;
  while (std::getline(in, line) && line.starts_with('#')) {
  }
  if (!in || line != "token,x,y,mod2,mod3,mod4") throw std::invalid_argument("bad embedding CSV header");
  std::vector<EmbeddingRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      const auto c = line.find(',', pos);
      f.push_back(line.substr(pos, c == std::string::npos ? std::string::npos : c - pos));
      if (c == std::string::npos) break;
      pos = c + 1;
    }
    if (f.size() != 6) throw std::invalid_argument("bad embedding CSV row: " + line);
    auto as_opt = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<int>(std::stoi(s)); };
    rows.push_back({f[0], nlohmann::json::parse(f[1]).get<double>(), nlohmann::json::parse(f[2]).get<double>(),
                    as_opt(f[3]), as_opt(f[4]), as_opt(f[5])});
  }
  return rows;
}

}  // namespace ectrace
