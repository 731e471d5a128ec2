#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "minpart/common.hpp"
#include "minpart/inference.hpp"
#include "minpart/matrix.hpp"
#include "minpart/rng.hpp"
#include "minpart/spaces.hpp"

namespace minpart {

struct Dataset {
  Matrix xs;
  std::vector<StructuredOutput> ys;
  OutputSpace space;
  std::string name;

  std::size_t size() const { return xs.rows; }

  void check() const {
    if (ys.size() != xs.rows) throw ShapeMismatch("dataset rows/labels mismatch");
    for (double v : xs.data)
      if (!std::isfinite(v)) throw ShapeMismatch("dataset features must be finite");
    for (const auto& y : ys)
      if (!contains(space, y)) throw ShapeMismatch("dataset label not in space");
  }
};

struct Split {
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;
  std::vector<std::size_t> test_idx;
};

namespace detail {

inline ParseError parse_error(const std::string& path, std::size_t line,
                              const std::string& what) {
  return ParseError(path + ":" + std::to_string(line) + ": " + what);
}

}  // namespace detail

/// libsvm multilabel text format: per line "l1,l2,... i1:v1 i2:v2 ..." with
/// 1-based labels and 1-based sparse feature indices; a line starting with
/// whitespace has an empty label set. k and d default to the maxima found in
/// the file; pass overrides for files that omit trailing ids.
inline Dataset parse_libsvm_multilabel(const std::string& path, int k_override = 0,
                                       int d_override = 0) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::vector<std::vector<int>> labels;
  std::vector<std::vector<std::pair<int, double>>> feats;
  std::string line;
  std::size_t lineno = 0;
  int max_label = 0;
  int max_feat = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() && in.eof()) break;
    const bool empty_labels = !line.empty() && (line[0] == ' ' || line[0] == '\t');
    std::istringstream ss(line);
    std::string tok;
    std::vector<int> ls;
    std::vector<std::pair<int, double>> fs;
    bool first = true;
    while (ss >> tok) {
      const bool is_feature = tok.find(':') != std::string::npos;
      if (first && !empty_labels) {
        if (is_feature)
          throw detail::parse_error(path, lineno, "missing label field");
        std::istringstream ls_ss(tok);
        std::string part;
        while (std::getline(ls_ss, part, ',')) {
          std::size_t pos = 0;
          int lab;
          try {
            lab = std::stoi(part, &pos);
          } catch (const std::exception&) {
            throw detail::parse_error(path, lineno, "bad label '" + part + "'");
          }
          if (pos != part.size())
            throw detail::parse_error(path, lineno, "bad label '" + part + "'");
          if (lab < 1)
            throw LabelOutOfRange(path + ":" + std::to_string(lineno) +
                                  ": label " + std::to_string(lab) + " < 1");
          ls.push_back(lab);
          max_label = std::max(max_label, lab);
        }
        first = false;
        continue;
      }
      first = false;
      if (!is_feature)
        throw detail::parse_error(path, lineno, "expected idx:val, got '" + tok + "'");
      const auto colon = tok.find(':');
      int idx;
      double val;
      try {
        idx = std::stoi(tok.substr(0, colon));
        val = std::stod(tok.substr(colon + 1));
      } catch (const std::exception&) {
        throw detail::parse_error(path, lineno, "bad feature '" + tok + "'");
      }
      if (idx < 1)
        throw detail::parse_error(path, lineno, "feature index must be >= 1");
      if (!std::isfinite(val))
        throw detail::parse_error(path, lineno, "non-finite feature value");
      fs.emplace_back(idx, val);
      max_feat = std::max(max_feat, idx);
    }
    labels.push_back(std::move(ls));
    feats.push_back(std::move(fs));
  }
  const int k = k_override > 0 ? k_override : std::max(max_label, 1);
  const int d = d_override > 0 ? d_override : std::max(max_feat, 1);
  if (max_label > k)
    throw LabelOutOfRange(path + ": label " + std::to_string(max_label) +
                          " exceeds k=" + std::to_string(k));
  if (max_feat > d)
    throw ParseError(path + ": feature index " + std::to_string(max_feat) +
                     " exceeds d=" + std::to_string(d));
  Dataset ds;
  ds.space = OutputSpace{SpaceKind::BinaryVectors, k};
  ds.name = path;
  ds.xs = Matrix(labels.size(), static_cast<std::size_t>(d));
  ds.ys.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto row = ds.xs.row(i);
    for (const auto& [idx, val] : feats[i]) row[static_cast<std::size_t>(idx - 1)] = val;
    ds.ys[i].values.assign(static_cast<std::size_t>(k), 0.0);
    for (int lab : labels[i]) ds.ys[i].values[static_cast<std::size_t>(lab - 1)] = 1.0;
  }
  return ds;
}

inline void write_libsvm_multilabel(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path);
  char buf[64];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    bool first_label = true;
    for (std::size_t j = 0; j < ds.ys[i].values.size(); ++j) {
      if (ds.ys[i].values[j] == 1.0) {
        out << (first_label ? "" : ",") << (j + 1);
        first_label = false;
      }
    }
    const auto row = ds.xs.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (row[j] == 0.0) continue;
      std::snprintf(buf, sizeof buf, "%.17g", row[j]);
      out << ' ' << (j + 1) << ':' << buf;
    }
    out << '\n';
  }
}

/// Label-ranking CSV: one header row, then d feature columns followed by k
/// rank columns holding a permutation of 1..k per row.
inline Dataset parse_label_ranking_csv(const std::string& path, int k,
                                       bool as_matrices = false) {
  if (k < 1) throw ConfigError("label ranking needs k >= 1");
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": missing header row");
  std::size_t lineno = 1;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<double> cells;
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t pos = 0;
        cells.push_back(std::stod(cell, &pos));
        if (!std::isfinite(cells.back()))
          throw detail::parse_error(path, lineno, "non-finite value");
      } catch (const ParseError&) {
        throw;
      } catch (const std::exception&) {
        throw detail::parse_error(path, lineno, "bad cell '" + cell + "'");
      }
    }
    if (static_cast<int>(cells.size()) <= k)
      throw detail::parse_error(path, lineno, "row has no feature columns");
    if (!rows.empty() && cells.size() != rows.front().size())
      throw detail::parse_error(path, lineno, "ragged row");
    rows.push_back(std::move(cells));
  }
  const std::size_t d = rows.empty() ? 0 : rows.front().size() - static_cast<std::size_t>(k);
  Dataset ds;
  ds.space = OutputSpace{SpaceKind::PermutationVectors, k};
  ds.name = path;
  ds.xs = Matrix(rows.size(), d);
  ds.ys.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto row = ds.xs.row(i);
    for (std::size_t j = 0; j < d; ++j) row[j] = rows[i][j];
    StructuredOutput y;
    y.values.assign(rows[i].begin() + static_cast<std::ptrdiff_t>(d), rows[i].end());
    if (!contains(ds.space, y))
      throw NotAPermutation(path + ": row " + std::to_string(i + 2) +
                            ": rank columns are not a permutation of 1.." +
                            std::to_string(k));
    ds.ys[i] = std::move(y);
  }
  if (as_matrices) {
    ds.space = OutputSpace{SpaceKind::PermutationMatrices, k};
    for (auto& y : ds.ys) y = ranks_to_matrix(y, k);
  }
  return ds;
}

inline void write_label_ranking_csv(const Dataset& ds, const std::string& path) {
  if (ds.space.kind != SpaceKind::PermutationVectors)
    throw WrongKind("write_label_ranking_csv needs a permutation-vector dataset");
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path);
  for (std::size_t j = 0; j < ds.xs.cols; ++j) out << 'f' << (j + 1) << ',';
  for (int j = 0; j < ds.space.k; ++j)
    out << 'r' << (j + 1) << (j + 1 == ds.space.k ? "" : ",");
  out << '\n';
  char buf[64];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto row = ds.xs.row(i);
    for (double v : row) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << buf << ',';
    }
    for (std::size_t j = 0; j < ds.ys[i].values.size(); ++j)
      out << static_cast<int>(ds.ys[i].values[j])
          << (j + 1 == ds.ys[i].values.size() ? "" : ",");
    out << '\n';
  }
}

/// Synthetic multilabel task: x ~ N(0, I_d), hidden W*, and
/// y_j = 1 iff (W* x)_j + noise * eps_j >= 0.
inline Dataset synth_multilabel(int n, int d, int k, double noise,
                                std::uint64_t seed) {
  if (n < 0 || d < 1 || k < 1) throw ConfigError("bad synthetic sizes");
  RngState rng = RngState::seeded(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix w(static_cast<std::size_t>(k), static_cast<std::size_t>(d));
  for (double& v : w.data) v = rng.next_normal() * scale;
  Dataset ds;
  ds.space = OutputSpace{SpaceKind::BinaryVectors, k};
  ds.name = "synth_multilabel";
  ds.xs = Matrix(static_cast<std::size_t>(n), static_cast<std::size_t>(d));
  ds.ys.resize(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i) {
    auto x = ds.xs.row(i);
    for (double& v : x) v = rng.next_normal();
    auto& y = ds.ys[i];
    y.values.resize(static_cast<std::size_t>(k));
    for (std::size_t j = 0; j < static_cast<std::size_t>(k); ++j) {
      double logit = 0.0;
      const auto wr = w.row(j);
      for (std::size_t c = 0; c < x.size(); ++c) logit += wr[c] * x[c];
      logit += noise * rng.next_normal();
      y.values[j] = logit >= 0.0 ? 1.0 : 0.0;
    }
  }
  return ds;
}

/// Synthetic label ranking: y = argsort mode of hidden logits W* x.
inline Dataset synth_label_ranking(int n, int d, int k, std::uint64_t seed,
                                   bool as_matrices = false) {
  if (n < 0 || d < 1 || k < 1) throw ConfigError("bad synthetic sizes");
  RngState rng = RngState::seeded(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix w(static_cast<std::size_t>(k), static_cast<std::size_t>(d));
  for (double& v : w.data) v = rng.next_normal() * scale;
  Dataset ds;
  ds.space = OutputSpace{as_matrices ? SpaceKind::PermutationMatrices
                                     : SpaceKind::PermutationVectors,
                         k};
  ds.name = "synth_label_ranking";
  ds.xs = Matrix(static_cast<std::size_t>(n), static_cast<std::size_t>(d));
  ds.ys.resize(static_cast<std::size_t>(n));
  std::vector<double> theta(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < static_cast<std::size_t>(n); ++i) {
    auto x = ds.xs.row(i);
    for (double& v : x) v = rng.next_normal();
    for (std::size_t j = 0; j < static_cast<std::size_t>(k); ++j) {
      double acc = 0.0;
      const auto wr = w.row(j);
      for (std::size_t c = 0; c < x.size(); ++c) acc += wr[c] * x[c];
      theta[j] = acc;
    }
    StructuredOutput y = mode_permutahedron(theta);
    ds.ys[i] = as_matrices ? ranks_to_matrix(y, k) : y;
  }
  return ds;
}

/// Deterministic shuffled split; fractions sum to at most 1.
inline Split split_dataset(const Dataset& ds, std::array<double, 3> fractions,
                           std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw ConfigError("split fractions must be nonnegative");
    total += f;
  }
  if (total > 1.0 + 1e-12) throw ConfigError("split fractions must sum to <= 1");
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  RngState rng = RngState::seeded(seed);
  rng.shuffle(idx);
  Split sp;
  const auto n = static_cast<double>(ds.size());
  std::size_t pos = 0;
  auto take = [&](double f) {
    const auto count = static_cast<std::size_t>(std::floor(f * n + 1e-9));
    std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(pos),
                                  idx.begin() + static_cast<std::ptrdiff_t>(std::min(pos + count, idx.size())));
    pos += part.size();
    return part;
  };
  sp.train_idx = take(fractions[0]);
  sp.val_idx = take(fractions[1]);
  sp.test_idx = take(fractions[2]);
  return sp;
}

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> idx) {
  Dataset out;
  out.space = ds.space;
  out.name = ds.name;
  out.xs = Matrix(idx.size(), ds.xs.cols);
  out.ys.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src = ds.xs.row(idx[i]);
    auto dst = out.xs.row(i);
    std::copy(src.begin(), src.end(), dst.begin());
    out.ys[i] = ds.ys[idx[i]];
  }
  return out;
}

struct Standardization {
  std::vector<double> mean;
  std::vector<double> scale;  // 1 / std, with std < 1e-12 treated as 1
};

/// Per-column z-score statistics computed on the given rows only.
inline Standardization fit_standardization(const Dataset& ds,
                                           std::span<const std::size_t> rows) {
  Standardization st;
  st.mean.assign(ds.xs.cols, 0.0);
  st.scale.assign(ds.xs.cols, 1.0);
  if (rows.empty()) return st;
  for (std::size_t i : rows) {
    const auto r = ds.xs.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) st.mean[j] += r[j];
  }
  for (double& m : st.mean) m /= static_cast<double>(rows.size());
  std::vector<double> var(ds.xs.cols, 0.0);
  for (std::size_t i : rows) {
    const auto r = ds.xs.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      const double c = r[j] - st.mean[j];
      var[j] += c * c;
    }
  }
  for (std::size_t j = 0; j < var.size(); ++j) {
    const double sd = std::sqrt(var[j] / static_cast<double>(rows.size()));
    st.scale[j] = sd < 1e-12 ? 1.0 : 1.0 / sd;
  }
  return st;
}

inline void apply_standardization(Dataset& ds, const Standardization& st) {
  for (std::size_t i = 0; i < ds.xs.rows; ++i) {
    auto r = ds.xs.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = (r[j] - st.mean[j]) * st.scale[j];
  }
}

}  // namespace minpart
