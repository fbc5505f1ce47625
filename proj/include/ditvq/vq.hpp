#pragma once

// Vector quantization of 2-D weight matrices: row sub-vectors, K-Means
// codebooks, top-n candidate sets, soft/hard reconstruction, the symmetric
// uniform baseline, bit packing and storage accounting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ditvq/common.hpp"
#include "ditvq/parallel.hpp"

namespace ditvq {

struct LayerShape {
  std::size_t out = 0;            // o
  std::size_t in = 0;             // i
  std::size_t dim = 0;            // d
  std::size_t codebook_size = 0;  // k

  /// Throws ConfigError unless d | i and k is a power of two in [2, 65536].
  void validate() const;
  std::size_t count() const { return out * in / dim; }
  unsigned bits_per_index() const;
  std::string str() const;

  friend bool operator==(const LayerShape&, const LayerShape&) = default;
};

bool is_power_of_two(std::size_t k);

template <typename Scalar>
struct Codebook {
  Matrix<Scalar> words;  // k × d

  std::size_t size() const { return static_cast<std::size_t>(words.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(words.cols()); }
};

/// One codeword index per sub-vector, row-major sub-vector order.
using Assignments = std::vector<std::uint32_t>;

/// Per sub-vector: n candidate codewords in ascending distance order and the
/// logits whose softmax gives the mixing ratios.
struct CandidateSet {
  std::size_t n = 0;
  std::vector<std::uint32_t> candidates;  // count × n
  std::vector<float> logits;              // count × n
  bool frozen = false;

  std::size_t count() const { return n == 0 ? 0 : candidates.size() / n; }
  std::span<const std::uint32_t> of(std::size_t s) const { return {candidates.data() + s * n, n}; }
  std::span<const float> logits_of(std::size_t s) const { return {logits.data() + s * n, n}; }
};

/// Softmax over one row of logits, max-shifted, normaliser summed in 64-bit.
void softmax_row(std::span<const float> logits, std::span<float> out);

struct UniformQuantConfig {
  unsigned bits = 0;
  double scale = 1.0;
};

template <typename Scalar>
struct UniformQuantResult {
  Matrix<Scalar> dequantized;
  UniformQuantConfig config;
};

struct PackedAssignments {
  unsigned bits_per_index = 0;
  std::size_t count = 0;
  std::vector<std::uint8_t> payload;
};

struct StorageReport {
  std::uint64_t assignment_bits = 0;
  std::uint64_t codebook_bits = 0;
  double effective_bits_per_weight = 0.0;
};

struct KMeansOptions {
  std::size_t k = 256;
  std::uint64_t seed = 0;
  int max_iters = 100;
  double tol = 1e-6;  // relative objective change
};

template <typename Scalar>
struct KMeansResult {
  Codebook<Scalar> codebook;
  Assignments assignments;
  /// Objective after every assignment step, starting with the seeding.
  std::vector<double> objective_history;
  double objective = 0.0;
  int iterations = 0;
};

// ---------------------------------------------------------------------------

/// Exact accumulator for non-negative values at 2^-64 resolution. Integer
/// addition is associative, so sums are independent of grouping and the
/// per-term truncation is monotone.
class ExactSum {
 public:
  void add(double v) {
    if (!(v >= 0.0) || v >= 0x1.0p62) throw NumericalError("ExactSum: value out of range");
    acc_ += static_cast<unsigned __int128>(std::ldexp(static_cast<long double>(v), 64));
  }
  void add(const ExactSum& other) { acc_ += other.acc_; }
  double value() const { return static_cast<double>(std::ldexp(static_cast<long double>(acc_), -64)); }
  bool operator<=(const ExactSum& other) const { return acc_ <= other.acc_; }
  bool operator==(const ExactSum& other) const { return acc_ == other.acc_; }

 private:
  unsigned __int128 acc_ = 0;
};

/// Squared Euclidean distance accumulated in Scalar, dimension order fixed.
/// Every distance in this module goes through this exact operation sequence.
template <typename Scalar>
inline Scalar squared_distance(const Scalar* a, const Scalar* b, std::size_t d) {
  Scalar acc = 0;
  for (std::size_t t = 0; t < d; ++t) {
    const Scalar diff = a[t] - b[t];
    acc += diff * diff;
  }
  return acc;
}

template <typename Derived>
Matrix<typename Derived::Scalar> split_subvectors(const Eigen::MatrixBase<Derived>& w, std::size_t d) {
  using Scalar = typename Derived::Scalar;
  const auto cols = static_cast<std::size_t>(w.cols());
  if (d == 0 || cols % d != 0) {
    throw DimensionError("split_subvectors: d=" + std::to_string(d) + " does not divide i=" +
                         std::to_string(cols));
  }
  const Matrix<Scalar> rowmajor = w;
  return Eigen::Map<const Matrix<Scalar>>(rowmajor.data(), static_cast<Eigen::Index>(rowmajor.size() / d),
                                          static_cast<Eigen::Index>(d));
}

template <typename Derived>
Matrix<typename Derived::Scalar> join_subvectors(const Eigen::MatrixBase<Derived>& sub, std::size_t out,
                                                 std::size_t in) {
  using Scalar = typename Derived::Scalar;
  if (static_cast<std::size_t>(sub.size()) != out * in) {
    throw DimensionError("join_subvectors: element count mismatch");
  }
  const Matrix<Scalar> rowmajor = sub;
  return Eigen::Map<const Matrix<Scalar>>(rowmajor.data(), static_cast<Eigen::Index>(out),
                                          static_cast<Eigen::Index>(in));
}

namespace detail {

// Distances from one point to every codeword, with the codebook stored
// dimension-major so the inner loop runs over codewords.
template <typename Scalar>
inline void distances_to_all(const Scalar* point, const Matrix<Scalar>& words_t, Scalar* dist) {
  const Eigen::Index k = words_t.cols();
  std::fill(dist, dist + k, Scalar(0));
  for (Eigen::Index t = 0; t < words_t.rows(); ++t) {
    const Scalar* col = words_t.data() + t * k;
    const Scalar p = point[t];
    for (Eigen::Index c = 0; c < k; ++c) {
      const Scalar diff = p - col[c];
      dist[c] += diff * diff;
    }
  }
}

template <typename Scalar>
void assign_nearest(const Matrix<Scalar>& points, const Matrix<Scalar>& words, Assignments& out) {
  const Matrix<Scalar> words_t = words.transpose();
  const auto k = static_cast<std::size_t>(words.rows());
  const std::size_t d = static_cast<std::size_t>(points.cols());
  out.resize(static_cast<std::size_t>(points.rows()));
  parallel_for(out.size(), [&](std::size_t begin, std::size_t end) {
    std::vector<Scalar> dist(k);
    for (std::size_t p = begin; p < end; ++p) {
      distances_to_all(points.data() + p * d, words_t, dist.data());
      std::uint32_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (dist[c] < dist[best]) best = static_cast<std::uint32_t>(c);
      }
      out[p] = best;
    }
  });
}

template <typename Scalar>
ExactSum objective(const Matrix<Scalar>& points, const Matrix<Scalar>& words, const Assignments& a) {
  const std::size_t d = static_cast<std::size_t>(points.cols());
  ExactSum s;
  for (std::size_t p = 0; p < a.size(); ++p) {
    s.add(static_cast<double>(squared_distance(points.data() + p * d, words.data() + a[p] * d, d)));
  }
  return s;
}

}  // namespace detail

/// Index of the nearest codeword for every sub-vector (ties: lowest index).
template <typename Scalar>
Assignments nearest_codewords(const Matrix<Scalar>& subvectors, const Codebook<Scalar>& codebook) {
  if (subvectors.cols() != codebook.words.cols()) throw DimensionError("nearest_codewords: dimension mismatch");
  Assignments a;
  detail::assign_nearest(subvectors, codebook.words, a);
  return a;
}

/// Lloyd iterations from K-Means++ seeding. The recorded objective is
/// non-increasing at every step: it is summed exactly, and a centroid update
/// is kept only when it does not increase its cluster's error.
template <typename Scalar>
KMeansResult<Scalar> kmeans(const Matrix<Scalar>& points, const KMeansOptions& opt) {
  const std::size_t count = static_cast<std::size_t>(points.rows());
  const std::size_t d = static_cast<std::size_t>(points.cols());
  const std::size_t k = opt.k;
  if (k == 0 || d == 0) throw ConfigError("kmeans: k and d must be positive");
  if (count < k) {
    throw ConfigError("kmeans: " + std::to_string(count) + " sub-vectors cannot fill k=" + std::to_string(k));
  }

  Rng rng(opt.seed);
  Matrix<Scalar> words(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));

  // K-Means++ seeding.
  std::vector<double> mind(count);
  auto place = [&](std::size_t j, std::size_t p) { words.row(static_cast<Eigen::Index>(j)) = points.row(static_cast<Eigen::Index>(p)); };
  place(0, rng.index(count));
  for (std::size_t p = 0; p < count; ++p) {
    mind[p] = static_cast<double>(squared_distance(points.data() + p * d, words.data(), d));
  }
  for (std::size_t j = 1; j < k; ++j) {
    double total = 0.0;
    for (double v : mind) total += v;
    std::size_t pick = 0;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double run = 0.0;
      pick = count;
      for (std::size_t p = 0; p < count; ++p) {
        run += mind[p];
        if (mind[p] > 0.0 && run > target) {
          pick = p;
          break;
        }
      }
      if (pick == count) {  // rounding at the tail
        pick = static_cast<std::size_t>(
            std::distance(mind.begin(), std::max_element(mind.begin(), mind.end())));
      }
    } else {
      pick = rng.index(count);
    }
    place(j, pick);
    const Scalar* c = words.data() + j * d;
    for (std::size_t p = 0; p < count; ++p) {
      mind[p] = std::min(mind[p], static_cast<double>(squared_distance(points.data() + p * d, c, d)));
    }
  }

  KMeansResult<Scalar> result;
  Assignments assign;
  std::vector<double> sums(k * d);
  std::vector<std::size_t> members(k);
  for (int it = 0;; ++it) {
    detail::assign_nearest(points, words, assign);
    const ExactSum obj = detail::objective(points, words, assign);
    const double value = obj.value();
    const bool increased = !result.objective_history.empty() && value > result.objective_history.back();
    if (increased) throw NumericalError("kmeans: objective increased");
    const double prev = result.objective_history.empty() ? 0.0 : result.objective_history.back();
    result.objective_history.push_back(value);
    result.iterations = it;
    const bool converged =
        value == 0.0 || (it > 0 && prev > 0.0 && (prev - value) / prev < opt.tol);
    if (converged || it >= opt.max_iters) break;

    // Centroid update.
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(members.begin(), members.end(), 0);
    for (std::size_t p = 0; p < count; ++p) {
      const std::size_t c = assign[p];
      ++members[c];
      for (std::size_t t = 0; t < d; ++t) sums[c * d + t] += static_cast<double>(points(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(t)));
    }
    Matrix<Scalar> proposal = words;
    for (std::size_t c = 0; c < k; ++c) {
      if (members[c] == 0) continue;
      for (std::size_t t = 0; t < d; ++t) {
        proposal(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(t)) =
            static_cast<Scalar>(sums[c * d + t] / static_cast<double>(members[c]));
      }
    }
    std::vector<ExactSum> old_sse(k), new_sse(k);
    for (std::size_t p = 0; p < count; ++p) {
      const std::size_t c = assign[p];
      const Scalar* x = points.data() + p * d;
      old_sse[c].add(static_cast<double>(squared_distance(x, words.data() + c * d, d)));
      new_sse[c].add(static_cast<double>(squared_distance(x, proposal.data() + c * d, d)));
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (members[c] > 0 && new_sse[c] <= old_sse[c]) words.row(static_cast<Eigen::Index>(c)) = proposal.row(static_cast<Eigen::Index>(c));
    }

    // Empty clusters move to the points with the largest current error.
    std::vector<std::size_t> empty;
    for (std::size_t c = 0; c < k; ++c) {
      if (members[c] == 0) empty.push_back(c);
    }
    if (!empty.empty()) {
      std::vector<double> err(count);
      for (std::size_t p = 0; p < count; ++p) {
        err[p] = static_cast<double>(squared_distance(points.data() + p * d, words.data() + assign[p] * d, d));
      }
      std::vector<std::size_t> order(count);
      std::iota(order.begin(), order.end(), 0);
      const std::size_t take = std::min(empty.size(), count);
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                        [&](std::size_t a, std::size_t b) { return err[a] > err[b] || (err[a] == err[b] && a < b); });
      for (std::size_t e = 0; e < take; ++e) place(empty[e], order[e]);
    }
  }
  result.codebook.words = std::move(words);
  result.assignments = std::move(assign);
  result.objective = result.objective_history.back();
  return result;
}

/// Top-n nearest codewords per sub-vector (ties: lowest index), logits zero.
template <typename Scalar>
CandidateSet build_candidates(const Matrix<Scalar>& subvectors, const Codebook<Scalar>& codebook, std::size_t n) {
  const std::size_t k = codebook.size();
  const std::size_t d = codebook.dim();
  if (n < 1 || n > k) {
    throw ConfigError("build_candidates: n=" + std::to_string(n) + " must lie in [1, k=" + std::to_string(k) + "]");
  }
  if (static_cast<std::size_t>(subvectors.cols()) != d) throw DimensionError("build_candidates: dimension mismatch");
  const std::size_t count = static_cast<std::size_t>(subvectors.rows());
  CandidateSet set;
  set.n = n;
  set.candidates.resize(count * n);
  set.logits.assign(count * n, 0.0F);
  const Matrix<Scalar> words_t = codebook.words.transpose();
  parallel_for(count, [&](std::size_t begin, std::size_t end) {
    std::vector<Scalar> dist(k);
    std::vector<std::uint32_t> idx(k);
    for (std::size_t s = begin; s < end; ++s) {
      detail::distances_to_all(subvectors.data() + s * d, words_t, dist.data());
      std::iota(idx.begin(), idx.end(), 0U);
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(),
                        [&](std::uint32_t a, std::uint32_t b) { return dist[a] < dist[b] || (dist[a] == dist[b] && a < b); });
      std::copy_n(idx.begin(), n, set.candidates.begin() + static_cast<std::ptrdiff_t>(s * n));
    }
  });
  return set;
}

template <typename Scalar>
Matrix<Scalar> reconstruct_hard(const Codebook<Scalar>& codebook, const Assignments& a, const LayerShape& shape) {
  const std::size_t d = codebook.dim();
  if (d != shape.dim || a.size() != shape.count()) throw DimensionError("reconstruct_hard: shape mismatch");
  Matrix<Scalar> sub(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(d));
  for (std::size_t s = 0; s < a.size(); ++s) {
    if (a[s] >= codebook.size()) throw EncodingError("reconstruct_hard: assignment out of range");
    sub.row(static_cast<Eigen::Index>(s)) = codebook.words.row(a[s]);
  }
  return join_subvectors(sub, shape.out, shape.in);
}

/// Each sub-vector is the ratio-weighted sum of its candidate codewords.
template <typename Scalar>
Matrix<Scalar> reconstruct_soft(const Codebook<Scalar>& codebook, const CandidateSet& set, const LayerShape& shape) {
  const std::size_t d = codebook.dim();
  if (d != shape.dim || set.count() != shape.count()) throw DimensionError("reconstruct_soft: shape mismatch");
  Matrix<Scalar> sub = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(set.count()), static_cast<Eigen::Index>(d));
  std::vector<float> ratios(set.n);
  for (std::size_t s = 0; s < set.count(); ++s) {
    softmax_row(set.logits_of(s), ratios);
    const auto cand = set.of(s);
    for (std::size_t j = 0; j < set.n; ++j) {
      sub.row(static_cast<Eigen::Index>(s)) += static_cast<Scalar>(ratios[j]) * codebook.words.row(cand[j]);
    }
  }
  return join_subvectors(sub, shape.out, shape.in);
}

/// Per sub-vector, the candidate with the largest ratio; ties go to the
/// earlier (nearer) candidate.
Assignments finalize(const CandidateSet& set);

template <typename Derived>
UniformQuantResult<typename Derived::Scalar> uniform_quantize(const Eigen::MatrixBase<Derived>& w, unsigned bits) {
  using Scalar = typename Derived::Scalar;
  if (bits != 2 && bits != 3 && bits != 4 && bits != 8) {
    throw ConfigError("uniform_quantize: bit-width must be one of 2, 3, 4, 8");
  }
  const double qmax = static_cast<double>((1U << (bits - 1)) - 1U);
  const double maxabs = static_cast<double>(w.cwiseAbs().maxCoeff());
  UniformQuantResult<Scalar> r;
  r.config.bits = bits;
  if (maxabs == 0.0) {
    r.config.scale = 1.0;
    r.dequantized = Matrix<Scalar>::Zero(w.rows(), w.cols());
    return r;
  }
  const double s = maxabs / qmax;
  r.config.scale = s;
  r.dequantized = w.unaryExpr([s, qmax](Scalar v) {
    const double q = std::clamp(std::round(static_cast<double>(v) / s), -qmax, qmax);
    return static_cast<Scalar>(s * q);
  });
  return r;
}

PackedAssignments pack(const Assignments& a, std::size_t k);
Assignments unpack(const PackedAssignments& packed, std::size_t count, std::size_t k);
std::size_t packed_size_bytes(std::size_t count, std::size_t k);

StorageReport storage_report(const LayerShape& shape);

/// K-Means codebook, nearest assignments and top-n candidates for one layer.
struct LayerInit {
  Codebook<float> codebook;
  Assignments assignments;
  CandidateSet candidates;
  double objective = 0.0;  // ||W - C[A]||^2
};

LayerInit quantize_layer(const MatrixF& weight, const LayerShape& shape, std::size_t n, std::uint64_t seed);

template <typename A, typename B>
double mean_squared_error(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("mean_squared_error: shape mismatch");
  return (a.template cast<double>() - b.template cast<double>()).squaredNorm() / static_cast<double>(a.size());
}

}  // namespace ditvq
