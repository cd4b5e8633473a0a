#include "dppa.hpp"

#include <algorithm>
#include <cmath>

#include "linalg.hpp"

namespace gridattn {

void KernelConfig::validate() const {
  if (!(bandwidth > 0.0)) throw CliError("config_error", "kernel bandwidth must be positive");
  if (!(jitter > 0.0)) throw CliError("config_error", "kernel jitter must be positive");
  if (!std::isfinite(quality_weight)) throw CliError("config_error", "quality_weight must be finite");
}

json KernelConfig::to_json() const {
  return {{"quality_weight", quality_weight}, {"bandwidth", bandwidth}, {"jitter", jitter}};
}

KernelConfig KernelConfig::from_json(const json& j) {
  KernelConfig c;
  c.quality_weight = j.at("quality_weight").get<double>();
  c.bandwidth = j.at("bandwidth").get<double>();
  c.jitter = j.at("jitter").get<double>();
  c.validate();
  return c;
}

KernelMatrix build_kernel(const Matrix& responses, std::size_t num_frequencies,
                          const KernelConfig& config) {
  config.validate();
  std::size_t p = responses.rows, n = responses.cols;
  if (p == 0 || n == 0) throw CliError("input_error", "build_kernel: empty responses");
  if (!responses.all_finite()) throw CliError("input_error", "build_kernel: non-finite responses");
  if (n % num_frequencies != 0)
    throw CliError("input_error", "build_kernel: cells not divisible into frequency blocks");

  KernelMatrix out;
  out.num_frequencies = num_frequencies;
  out.num_phases = n / num_frequencies;
  out.config = config;
  out.variances.assign(n, 0.0);

  // Center columns; population variance per column.
  Matrix centered(p, n);
  std::vector<double> mean(n, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    const double* r = responses.row(i);
    for (std::size_t j = 0; j < n; ++j) mean[j] += r[j];
  }
  for (std::size_t j = 0; j < n; ++j) mean[j] /= static_cast<double>(p);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(p); ++i) {
    const double* r = responses.row(static_cast<std::size_t>(i));
    double* c = centered.row(static_cast<std::size_t>(i));
    for (std::size_t j = 0; j < n; ++j) c[j] = r[j] - mean[j];
  }
  // Gram of centered columns gives both variances and pairwise distances.
  Matrix gram(n, n);
  gemm_tn(centered, centered, gram);
  for (std::size_t j = 0; j < n; ++j) out.variances[j] = gram(j, j) / static_cast<double>(p);

  out.entries = Matrix(n, n);
  double wm = config.quality_weight, b = config.bandwidth;
  std::vector<double> quality(n);
  for (std::size_t j = 0; j < n; ++j) quality[j] = std::exp(wm * out.variances[j] / 2.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
    std::size_t i = static_cast<std::size_t>(ii);
    for (std::size_t j = 0; j <= i; ++j) {
      double d2 = gram(i, i) + gram(j, j) - 2.0 * gram(i, j);
      if (d2 < 0.0) d2 = 0.0;
      double v = quality[i] * quality[j] * std::exp(-b * d2);
      out.entries(i, j) = v;
      out.entries(j, i) = v;
    }
  }
  if (!out.entries.all_finite()) throw CliError("numeric_error", "build_kernel: non-finite kernel");
  return out;
}

bool kernel_is_psd(const KernelMatrix& v) {
  Matrix a = v.entries;
  for (std::size_t i = 0; i < a.rows; ++i) a(i, i) += v.config.jitter;
  return cholesky_lower(a);
}

json AttentionWeights::to_json() const {
  return {{"w", w}, {"per_frequency", per_frequency}, {"f_max", f_max}, {"trace", trace}};
}

AttentionWeights AttentionWeights::from_json(const json& j) {
  AttentionWeights a;
  a.w = j.at("w").get<std::vector<double>>();
  a.per_frequency = j.at("per_frequency").get<std::vector<double>>();
  a.f_max = j.at("f_max").get<std::size_t>();
  if (j.contains("trace")) a.trace = j.at("trace").get<std::vector<double>>();
  return a;
}

namespace {

// Factor the symmetric form W^{1/2} (V_blk - I) W^{1/2} + I with escalating
// diagonal jitter. Returns the Cholesky factor in m.
void factor_symmetric_form(const double* w, const Matrix& v, std::size_t lo, std::size_t nb,
                           double jitter0, Matrix& m) {
  m = Matrix(nb, nb);
  for (std::size_t i = 0; i < nb; ++i) {
    double si = std::sqrt(w[lo + i]);
    for (std::size_t j = 0; j < nb; ++j) {
      double sj = std::sqrt(w[lo + j]);
      double a = v(lo + i, lo + j) - (i == j ? 1.0 : 0.0);
      m(i, j) = si * a * sj + (i == j ? 1.0 : 0.0);
    }
  }
  Matrix trial = m;
  if (cholesky_lower(trial)) {
    m = std::move(trial);
    return;
  }
  for (double jit = jitter0; jit <= 1e-4; jit *= 10.0) {
    trial = m;
    for (std::size_t i = 0; i < nb; ++i) trial(i, i) += jit;
    if (cholesky_lower(trial)) {
      m = std::move(trial);
      return;
    }
  }
  throw CliError("numeric_error", "objective factorization failed after jitter escalation");
}

double block_objective(const double* w, const Matrix& v, std::size_t lo, std::size_t nb,
                       double jitter) {
  Matrix l;
  factor_symmetric_form(w, v, lo, nb, jitter, l);
  return cholesky_logdet(l);
}

// grad_i = Y_ii / sqrt(w_i) with (sym form) Y = M^{-1} W^{1/2} (V_blk - I).
void block_gradient(const double* w, const Matrix& v, std::size_t lo, std::size_t nb, double jitter,
                    double* grad) {
  Matrix l;
  factor_symmetric_form(w, v, lo, nb, jitter, l);
  Matrix rhs(nb, nb);
  for (std::size_t i = 0; i < nb; ++i) {
    double si = std::sqrt(w[lo + i]);
    for (std::size_t j = 0; j < nb; ++j)
      rhs(i, j) = si * (v(lo + i, lo + j) - (i == j ? 1.0 : 0.0));
  }
  cholesky_solve(l, rhs);
  for (std::size_t i = 0; i < nb; ++i) grad[i] = rhs(i, i) / std::sqrt(w[lo + i]);
}

}  // namespace

double dpp_objective(const std::vector<double>& w, const KernelMatrix& v,
                     std::vector<double>* per_band) {
  std::size_t nf = v.num_frequencies, np = v.num_phases;
  if (w.size() != v.dim()) throw std::invalid_argument("dpp_objective: w length mismatch");
  std::vector<double> bands(nf, 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::ptrdiff_t f = 0; f < static_cast<std::ptrdiff_t>(nf); ++f)
    bands[static_cast<std::size_t>(f)] =
        block_objective(w.data(), v.entries, static_cast<std::size_t>(f) * np, np, v.config.jitter);
  double total = 0.0;
  for (double b : bands) total += b;
  if (per_band) *per_band = std::move(bands);
  return total;
}

double dpp_objective_whole(const std::vector<double>& w, const Matrix& v, double jitter) {
  if (w.size() != v.rows) throw std::invalid_argument("dpp_objective_whole: w length mismatch");
  return block_objective(w.data(), v, 0, v.rows, jitter);
}

std::vector<double> dpp_objective_gradient(const std::vector<double>& w, const KernelMatrix& v) {
  std::size_t nf = v.num_frequencies, np = v.num_phases;
  if (w.size() != v.dim()) throw std::invalid_argument("gradient: w length mismatch");
  std::vector<double> grad(w.size(), 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (std::ptrdiff_t f = 0; f < static_cast<std::ptrdiff_t>(nf); ++f) {
    std::size_t lo = static_cast<std::size_t>(f) * np;
    block_gradient(w.data(), v.entries, lo, np, v.config.jitter, grad.data() + lo);
  }
  return grad;
}

std::vector<double> dpp_objective_gradient_whole(const std::vector<double>& w, const Matrix& v,
                                                 double jitter) {
  std::vector<double> grad(w.size(), 0.0);
  block_gradient(w.data(), v, 0, v.rows, jitter, grad.data());
  return grad;
}

AttentionWeights fit_attention(const KernelMatrix& v, std::size_t steps, const AdamConfig& adam) {
  if (steps < 1) throw CliError("config_error", "fit_attention: steps must be >= 1");
  std::size_t n = v.dim();
  AttentionWeights out;
  out.w.assign(n, 0.5);
  out.trace.reserve(steps + 1);
  std::vector<double> m(n, 0.0), s(n, 0.0);
  for (std::size_t t = 1; t <= steps; ++t) {
    std::vector<double> bands;
    double obj = dpp_objective(out.w, v, &bands);
    if (!std::isfinite(obj)) {
      json diag = {{"step", t}, {"trace", out.trace}};
      throw CliError("numeric_error", "fit_attention: non-finite objective", diag);
    }
    out.trace.push_back(obj);
    std::vector<double> g = dpp_objective_gradient(out.w, v);
    double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < n; ++i) {
      double gi = -g[i];  // minimize the negated objective
      m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * gi;
      s[i] = adam.beta2 * s[i] + (1.0 - adam.beta2) * gi * gi;
      double upd = adam.learning_rate * (m[i] / bc1) / (std::sqrt(s[i] / bc2) + adam.epsilon);
      double w = out.w[i] - upd;
      out.w[i] = std::clamp(w, kAttentionEps, 1.0 - kAttentionEps);
    }
  }
  double final_obj = dpp_objective(out.w, v, &out.per_frequency);
  if (!std::isfinite(final_obj))
    throw CliError("numeric_error", "fit_attention: non-finite final objective");
  out.trace.push_back(final_obj);
  out.f_max = 0;
  for (std::size_t f = 0; f < out.per_frequency.size(); ++f)
    if (out.per_frequency[f] >= out.per_frequency[out.f_max]) out.f_max = f;  // ties -> higher index
  return out;
}

std::size_t Selection::dim(std::size_t num_frequencies, std::size_t num_phases) const {
  switch (mode) {
    case SelectionMode::FMax:
      return num_phases;
    case SelectionMode::TopK:
      return k * num_phases;
    case SelectionMode::WeightedFull:
    case SelectionMode::Full:
      return num_frequencies * num_phases;
  }
  return 0;
}

std::vector<std::size_t> topk_bands(const AttentionWeights& attention, std::size_t k) {
  std::size_t nf = attention.per_frequency.size();
  if (k < 1 || k > nf) throw CliError("config_error", "top-k selection: k out of range");
  std::vector<std::size_t> order(nf);
  for (std::size_t i = 0; i < nf; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (attention.per_frequency[a] != attention.per_frequency[b])
      return attention.per_frequency[a] > attention.per_frequency[b];
    return a > b;  // ties toward higher band
  });
  order.resize(k);
  return order;
}

std::vector<double> select_embedding(const std::vector<double>& embedding,
                                     const AttentionWeights& attention, std::size_t num_phases,
                                     const Selection& sel) {
  switch (sel.mode) {
    case SelectionMode::FMax: {
      auto lo = embedding.begin() + static_cast<std::ptrdiff_t>(attention.f_max * num_phases);
      return std::vector<double>(lo, lo + static_cast<std::ptrdiff_t>(num_phases));
    }
    case SelectionMode::TopK: {
      std::vector<double> out;
      out.reserve(sel.k * num_phases);
      for (std::size_t band : topk_bands(attention, sel.k)) {
        auto lo = embedding.begin() + static_cast<std::ptrdiff_t>(band * num_phases);
        out.insert(out.end(), lo, lo + static_cast<std::ptrdiff_t>(num_phases));
      }
      return out;
    }
    case SelectionMode::WeightedFull: {
      std::vector<double> out(embedding.size());
      for (std::size_t i = 0; i < embedding.size(); ++i) out[i] = embedding[i] * attention.w[i];
      return out;
    }
    case SelectionMode::Full:
      return embedding;
  }
  return {};
}

void write_kernel(const std::filesystem::path& path, const KernelMatrix& v,
                  std::uint64_t codebook_hash) {
  json meta = {{"variances", v.variances},
               {"num_frequencies", v.num_frequencies},
               {"num_phases", v.num_phases},
               {"config", v.config.to_json()},
               {"codebook_hash", hash_hex(codebook_hash)}};
  write_matrix_blob(path, v.entries, meta);
}

KernelMatrix read_kernel(const std::filesystem::path& path, std::uint64_t* codebook_hash) {
  json meta;
  KernelMatrix v;
  v.entries = read_matrix_blob(path, &meta);
  v.variances = meta.at("variances").get<std::vector<double>>();
  v.num_frequencies = meta.at("num_frequencies").get<std::size_t>();
  v.num_phases = meta.at("num_phases").get<std::size_t>();
  v.config = KernelConfig::from_json(meta.at("config"));
  if (codebook_hash) *codebook_hash = std::stoull(meta.at("codebook_hash").get<std::string>(), nullptr, 16);
  return v;
}

}  // namespace gridattn
