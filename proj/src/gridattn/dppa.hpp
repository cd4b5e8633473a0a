#pragma once
#include <vector>

#include "gridcode.hpp"
#include "io.hpp"
#include "matrix.hpp"

namespace gridattn {

struct KernelConfig {
  double quality_weight = 1.0;  // exponent weight on per-cell variance
  double bandwidth = 0.1;       // Gaussian similarity bandwidth
  double jitter = 1e-8;         // diagonal regularizer for PSD checks / factorizations

  void validate() const;
  json to_json() const;
  static KernelConfig from_json(const json& j);
};

// V = D K D over grid cells, built from training-region responses.
// D = diag(exp(quality_weight * m_i / 2)) with m_i the per-cell response
// variance; K_ij = exp(-bandwidth * ||s_i - s_j||^2) with s_i the
// mean-centered response column (a zero-variance cell is exactly the zero
// vector). Cells are band-major, so block f occupies [f*N_p, (f+1)*N_p).
struct KernelMatrix {
  Matrix entries;                 // (N_f*N_p)^2
  std::vector<double> variances;  // m, length N_f*N_p
  std::size_t num_frequencies = 0;
  std::size_t num_phases = 0;
  KernelConfig config;

  std::size_t dim() const { return num_frequencies * num_phases; }
};

KernelMatrix build_kernel(const Matrix& responses, std::size_t num_frequencies,
                          const KernelConfig& config);

// Cholesky-based PSD check of entries + jitter*I.
bool kernel_is_psd(const KernelMatrix& v);

constexpr double kAttentionEps = 1e-4;

struct AttentionWeights {
  std::vector<double> w;              // in [eps, 1-eps]
  std::vector<double> per_frequency;  // objective value per band
  std::size_t f_max = 0;              // argmax band, ties toward higher index
  std::vector<double> trace;          // objective after each optimizer step

  json to_json() const;
  static AttentionWeights from_json(const json& j);
};

// Per-band relaxed log-determinant objective:
//   obj_f = logdet(diag(w_f)(V_f - I) + I)
// computed via the symmetric form logdet(W^{1/2}(V_f - I)W^{1/2} + I) and a
// Cholesky factorization. Returns the sum and fills per_band.
double dpp_objective(const std::vector<double>& w, const KernelMatrix& v,
                     std::vector<double>* per_band = nullptr);

// Whole-matrix variant (no per-band blocking), used by one-step training.
double dpp_objective_whole(const std::vector<double>& w, const Matrix& v, double jitter);

// d obj / d w_i = [(V_f - I) M_f^{-1}]_{ ii },  M_f = diag(w_f)(V_f - I) + I.
std::vector<double> dpp_objective_gradient(const std::vector<double>& w, const KernelMatrix& v);
std::vector<double> dpp_objective_gradient_whole(const std::vector<double>& w, const Matrix& v,
                                                 double jitter);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Gradient ascent on the objective with per-step clamping to [eps, 1-eps].
// w starts at 0.5. Throws on a non-finite objective.
AttentionWeights fit_attention(const KernelMatrix& v, std::size_t steps, const AdamConfig& adam);

enum class SelectionMode { FMax, TopK, WeightedFull, Full };

struct Selection {
  SelectionMode mode = SelectionMode::FMax;
  std::size_t k = 1;  // for TopK

  // Output dimensionality given bank geometry.
  std::size_t dim(std::size_t num_frequencies, std::size_t num_phases) const;
};

// Apply a selection to one embedding row (length N_f*N_p).
std::vector<double> select_embedding(const std::vector<double>& embedding,
                                     const AttentionWeights& attention, std::size_t num_phases,
                                     const Selection& sel);

/// Band order used by TopK: bands sorted by objective descending (ties toward
// higher index), truncated to k.
std::vector<std::size_t> topk_bands(const AttentionWeights& attention, std::size_t k);

void write_kernel(const std::filesystem::path& path, const KernelMatrix& v,
                  std::uint64_t codebook_hash);
KernelMatrix read_kernel(const std::filesystem::path& path, std::uint64_t* codebook_hash = nullptr);

}  // namespace gridattn
