#pragma once

// Error propagation through a linear time-varying recurrence
//   h(t) = A(t) h(t-1) + B x(t),   h(0) = 0
// under ||A(t)||_2 <= a * e^(t-T) and ||B||_2 <= b. An input perturbation
// with ||delta(t)||_2 <= eps gives ||Delta(t)||_2 <= eps*b / (1 - a*e^(t-T)),
// and eps*b / (1 - a) globally. Everything here runs in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "quamba/error.hpp"
#include "quamba/matrix.hpp"
#include "quamba/toy.hpp"

namespace quamba {

inline constexpr std::size_t kMaxSpectralDim = 128;
inline constexpr int kPowerIterations = 200;
inline constexpr double kPowerTolerance = 1e-12;
inline constexpr double kBoundSlack = 1e-9;

struct BoundParams {
  double a = 0.9;
  double b = 2.0;
  double eps = 0.01;
  std::size_t T = 64;
  std::size_t N = 8;  // state dimension
  std::size_t P = 4;  // input dimension

  void validate() const {
    if (!(a > 0.0 && a < 1.0)) throw Error("bound params: a must lie in (0, 1)");
    if (!(b > 0.0)) throw Error("bound params: b must be positive");
    if (!(eps >= 0.0) || !std::isfinite(eps)) throw Error("bound params: eps must be non-negative");
    if (T == 0) throw Error("bound params: T must be at least 1");
    if (N == 0 || P == 0 || N > kMaxSpectralDim || P > kMaxSpectralDim) {
      throw Error("bound params: dimensions must lie in [1, 128]");
    }
  }
};

namespace detail {

inline std::vector<double> mul(const MatrixD& m, std::span<const double> v) {
  std::vector<double> out(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < m.cols(); ++c) acc += m(r, c) * v[c];
    out[r] = acc;
  }
  return out;
}

inline std::vector<double> mul_t(const MatrixD& m, std::span<const double> v) {
  std::vector<double> out(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out[c] += m(r, c) * v[r];
  return out;
}

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline MatrixD matmul_d(const MatrixD& a, const MatrixD& b) {
  MatrixD out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double v = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += v * b(k, j);
    }
  return out;
}

}  // namespace detail

// Largest singular value by power iteration on M^T M.
inline double spectral_norm(const MatrixD& m) {
  if (m.rows() > kMaxSpectralDim || m.cols() > kMaxSpectralDim) {
    throw Error("spectral_norm: dimensions above 128 are not supported");
  }
  if (m.empty()) return 0.0;
  // Deterministic, non-symmetric start so it is not orthogonal to the top
  // singular vector for structured inputs.
  std::vector<double> v(m.cols());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.37 * static_cast<double>(i % 7) - 0.01 * static_cast<double>(i);
  double nv = detail::norm2(v);
  for (double& x : v) x /= nv;

  double sigma2 = 0.0;
  for (int it = 0; it < kPowerIterations; ++it) {
    const auto mv = detail::mul(m, v);
    const double rq = [&] {
      double s = 0.0;
      for (double x : mv) s += x * x;
      return s;
    }();
    auto w = detail::mul_t(m, mv);
    const double nw = detail::norm2(w);
    if (nw == 0.0) return std::sqrt(rq);
    for (std::size_t i = 0; i < w.size(); ++i) v[i] = w[i] / nw;
    const bool converged = it > 0 && std::fabs(rq - sigma2) <= kPowerTolerance * rq;
    sigma2 = rq;
    if (converged) break;
  }
  // Final Rayleigh quotient on the last iterate.
  const auto mv = detail::mul(m, v);
  double s = 0.0;
  for (double x : mv) s += x * x;
  return std::sqrt(std::max(s, sigma2));
}

struct LTISystem {
  std::vector<MatrixD> A;  // A[t-1] is A(t), t = 1..T
  MatrixD B;               // N x P
};

inline double a_envelope(const BoundParams& p, std::size_t t) {
  return p.a * std::exp(static_cast<double>(t) - static_cast<double>(p.T));
}

inline void check_system(const LTISystem& sys, const BoundParams& p) {
  if (sys.A.size() != p.T) throw Error("lti system: expected T transition matrices");
  for (std::size_t t = 1; t <= p.T; ++t) {
    const double lim = a_envelope(p, t);
    if (spectral_norm(sys.A[t - 1]) > lim * (1.0 + kBoundSlack)) {
      throw Error("lti system: ||A(" + std::to_string(t) + ")|| exceeds a*e^(t-T)");
    }
  }
  if (spectral_norm(sys.B) > p.b * (1.0 + kBoundSlack)) throw Error("lti system: ||B|| exceeds b");
}

inline LTISystem sample_lti(const BoundParams& p, std::uint64_t seed) {
  p.validate();
  Rng rng(seed);
  auto gaussian = [&](std::size_t r, std::size_t c) {
    MatrixD m(r, c);
    for (double& x : m.flat()) x = rng.normal();
    return m;
  };
  LTISystem sys;
  for (std::size_t t = 1; t <= p.T; ++t) {
    MatrixD m = gaussian(p.N, p.N);
    const double target = a_envelope(p, t) * rng.uniform(0.5, 1.0);
    const double s = target / spectral_norm(m);
    for (double& x : m.flat()) x *= s;
    sys.A.push_back(std::move(m));
  }
  MatrixD g = gaussian(p.N, p.P);
  const double s = p.b * rng.uniform(0.5, 1.0) / spectral_norm(g);
  for (double& x : g.flat()) x *= s;
  sys.B = std::move(g);
  check_system(sys, p);
  return sys;
}

// Delta(t) = h_bar(t) - h(t) for inputs x and x + delta (rows are time
// steps). The subtraction path is checked against the direct recurrence
// Delta(t) = A(t) Delta(t-1) + B delta(t).
inline std::vector<std::vector<double>> simulate_pair(const LTISystem& sys, const MatrixD& x, const MatrixD& delta) {
  const std::size_t T = sys.A.size();
  const std::size_t N = sys.B.rows();
  if (x.rows() != T || delta.rows() != T || x.cols() != sys.B.cols() || delta.cols() != sys.B.cols()) {
    throw Error("simulate_pair: input shape mismatch");
  }
  std::vector<double> h(N, 0.0), hb(N, 0.0), d(N, 0.0);
  std::vector<double> xb(sys.B.cols());
  std::vector<std::vector<double>> out;
  out.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < xb.size(); ++k) xb[k] = x(t, k) + delta(t, k);
    const auto ah = detail::mul(sys.A[t], h);
    const auto bx = detail::mul(sys.B, x.row(t));
    const auto ahb = detail::mul(sys.A[t], hb);
    const auto bxb = detail::mul(sys.B, xb);
    const auto ad = detail::mul(sys.A[t], d);
    const auto bd = detail::mul(sys.B, delta.row(t));
    std::vector<double> diff(N);
    double scale = 1.0;
    for (std::size_t i = 0; i < N; ++i) {
      h[i] = ah[i] + bx[i];
      hb[i] = ahb[i] + bxb[i];
      d[i] = ad[i] + bd[i];
      diff[i] = hb[i] - h[i];
      scale = std::max({scale, std::fabs(h[i]), std::fabs(hb[i])});
    }
    for (std::size_t i = 0; i < N; ++i) {
      if (std::fabs(diff[i] - d[i]) > 1e-12 * scale) {
        throw Error("simulate_pair: subtraction path departs from the error recurrence at t=" + std::to_string(t + 1));
      }
    }
    out.push_back(std::move(diff));
  }
  return out;
}

struct BoundValues {
  double per_step = 0.0;
  double global = 0.0;
};

inline BoundValues theoretical_bound(const BoundParams& p, std::size_t t) {
  if (t == 0 || t > p.T) throw Error("theoretical_bound: t must lie in [1, T]");
  const double at = a_envelope(p, t);
  if (!(at < 1.0)) throw Error("theoretical_bound: a*e^(t-T) must be below 1");
  return {p.eps * p.b / (1.0 - at), p.eps * p.b / (1.0 - p.a)};
}

struct BoundReport {
  BoundParams params;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  std::size_t violations = 0;
  double max_ratio = 0.0;
  std::vector<double> per_t_max;
  std::vector<std::uint64_t> violating_seeds;
};

namespace detail {

inline MatrixD random_rows(Rng& rng, std::size_t T, std::size_t P) {
  MatrixD m(T, P);
  for (double& v : m.flat()) v = rng.normal();
  return m;
}

// Each row a random direction scaled to norm exactly eps.
inline MatrixD exact_norm_rows(Rng& rng, std::size_t T, std::size_t P, double eps) {
  MatrixD m = random_rows(rng, T, P);
  for (std::size_t t = 0; t < T; ++t) {
    auto r = m.row(t);
    const double n = norm2(r);
    for (double& v : r) v = n > 0.0 ? v * eps / n : 0.0;
  }
  return m;
}

inline double ratio(double norm, double bound) {
  if (bound > 0.0) return norm / bound;
  return norm == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
}

}  // namespace detail

struct Trial {
  LTISystem sys;
  MatrixD x;
  MatrixD delta;
};

// Trial i is fully determined by seed + i.
inline Trial sample_trial(const BoundParams& p, std::uint64_t trial_seed) {
  Trial tr{sample_lti(p, trial_seed), {}, {}};
  Rng rng(trial_seed ^ 0xd1b54a32d192ed03ULL);
  tr.x = detail::random_rows(rng, p.T, p.P);
  tr.delta = detail::exact_norm_rows(rng, p.T, p.P, p.eps);
  return tr;
}

inline BoundReport verify_bound(const BoundParams& p, std::size_t trials, std::uint64_t seed) {
  p.validate();
  BoundReport r;
  r.params = p;
  r.trials = trials;
  r.seed = seed;
  r.per_t_max.assign(p.T, 0.0);
  for (std::size_t i = 0; i < trials; ++i) {
    const std::uint64_t s = seed + i;
    const Trial tr = sample_trial(p, s);
    const auto traj = simulate_pair(tr.sys, tr.x, tr.delta);
    bool bad = false;
    for (std::size_t t = 1; t <= p.T; ++t) {
      const auto bnd = theoretical_bound(p, t);
      const double n = detail::norm2(traj[t - 1]);
      const double q = detail::ratio(n, bnd.per_step);
      r.per_t_max[t - 1] = std::max(r.per_t_max[t - 1], q);
      r.max_ratio = std::max(r.max_ratio, q);
      if (n > bnd.per_step * (1.0 + kBoundSlack)) bad = true;
      if (t == p.T && n > bnd.global * (1.0 + kBoundSlack)) bad = true;
    }
    if (bad) {
      ++r.violations;
      r.violating_seeds.push_back(s);
    }
  }
  return r;
}

// Largest relative departure of ||Delta(t)|| from 2x when every delta is
// doubled, over `trials` sampled trials.
inline double linearity_deviation(const BoundParams& p, std::size_t trials, std::uint64_t seed) {
  double worst = 0.0;
  for (std::size_t i = 0; i < trials; ++i) {
    const Trial tr = sample_trial(p, seed + i);
    MatrixD twice = tr.delta;
    for (double& v : twice.flat()) v *= 2.0;
    const auto d1 = simulate_pair(tr.sys, tr.x, tr.delta);
    const auto d2 = simulate_pair(tr.sys, tr.x, twice);
    for (std::size_t t = 0; t < d1.size(); ++t) {
      const double n1 = detail::norm2(d1[t]);
      const double n2 = detail::norm2(d2[t]);
      if (n1 == 0.0 && n2 == 0.0) continue;
      worst = std::max(worst, std::fabs(n2 - 2.0 * n1) / (2.0 * n1));
    }
  }
  return worst;
}

// ||A(T) A(T-1) ... A(t)||_2 for t = 1..T, with suffix products built
// right to left.
inline std::vector<double> cumulative_spectral_norms(const std::vector<MatrixD>& A) {
  std::vector<double> out(A.size());
  if (A.empty()) return out;
  MatrixD prod = A.back();
  out.back() = spectral_norm(prod);
  for (std::size_t i = A.size() - 1; i-- > 0;) {
    prod = detail::matmul_d(prod, A[i]);
    out[i] = spectral_norm(prod);
  }
  return out;
}

inline nlohmann::json to_json(const BoundParams& p) {
  return {{"a", p.a}, {"b", p.b}, {"eps", p.eps}, {"T", p.T}, {"N", p.N}, {"P", p.P}};
}

inline nlohmann::json to_json(const BoundReport& r) {
  return {{"params", to_json(r.params)},
          {"seed", r.seed},
          {"trials", r.trials},
          {"violations", r.violations},
          {"max_ratio", r.max_ratio},
          {"per_t_max", r.per_t_max},
          {"violating_seeds", r.violating_seeds}};
}

}  // namespace quamba
