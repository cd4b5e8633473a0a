#pragma once
#include <array>
#include <map>
#include <optional>
#include <vector>

#include "dppa.hpp"
#include "gridcode.hpp"

namespace gridattn {

enum class RegionKind { Training, Translation, Scaling, ArithmeticRegion };

struct Region {
  RegionKind kind = RegionKind::Training;
  int k = 0;                 // region index in [1,9]; 0 for training
  std::int64_t m = 0;        // training square side

  // Inclusive bounds for problem points (for arithmetic regions these bound
  // the answer C; operands are bounded by the codebook coverage instead).
  std::int64_t lo() const;
  std::int64_t hi() const;

  json to_json() const;
  static Region from_json(const json& j);
};

// One scored 7-way problem. Context is (A,B,C) for analogies, (A,B) for
// arithmetic; candidates are stored in their shuffled slot order and
// candidates[target_index] is the correct completion.
struct Problem {
  std::vector<Point> context;
  std::array<Point, 7> candidates;
  int target_index = 0;
  int op = -1;  // -1 analogy, 0 add, 1 multiply
  Region region;

  Point answer() const { return candidates[static_cast<std::size_t>(target_index)]; }
  json to_json() const;
  static Problem from_json(const json& j);
};

struct DatasetSplit {
  std::vector<Problem> train;
  std::vector<Problem> validation;
  std::map<int, std::vector<Problem>> tests;  // region K -> problems
  json manifest;
};

// Analogy A:B::C:D with D-C = B-A. Displacement uniform over
// [-(M-1), M-1]^2, then anchors uniform over valid positions; foils uniform
// in-region, distinct, never equal to D. Train/validation disjoint by
// (displacement, A, C) tuple.
DatasetSplit gen_analogy_training(std::int64_t m, std::size_t n_train, std::size_t n_val,
                                  std::uint64_t seed);

enum class Regime { Translation, Scaling };

// Fresh training-style analogies transformed into each test region
// (translation: +K*M to every point; scaling: *K), foils resampled inside the
// transformed bounds. K runs over [k_lo, k_hi].
std::map<int, std::vector<Problem>> gen_analogy_tests(std::int64_t m, int k_lo, int k_hi,
                                                      std::size_t n_per_region, Regime regime,
                                                      std::int64_t coverage, std::uint64_t seed);

// Arithmetic C = A+B or A.*B with equal op counts; training keeps A,B,C in
// [0,M-1]^2, test region K constrains C to [K*M,(K+1)*M-1]^2 with operands
// rejection-sampled over [0, coverage-1]^2.
DatasetSplit gen_arithmetic(std::int64_t m, std::size_t n_train, std::size_t n_val,
                            std::size_t n_per_region, int k_lo, int k_hi, std::int64_t coverage,
                            std::uint64_t seed);

// Candidate-sequence batch: row ((p*7 + c)*seq_len + t) holds item t of
// candidate c of problem p.
struct SequenceBatch {
  std::size_t num_problems = 0;
  std::size_t seq_len = 0;
  std::size_t dim = 0;
  Matrix x;
  std::vector<int> targets;
};

// Embedding lookup with caching of selected vectors, shared across batches.
class EmbeddingCache {
 public:
  EmbeddingCache(const GridCodebook& cb, const AttentionWeights* attention, Selection sel);
  std::size_t dim() const { return dim_; }
  const double* get(Point p);  // encodes on first use

 private:
  const GridCodebook& cb_;
  const AttentionWeights* attention_;
  Selection sel_;
  std::size_t dim_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  std::vector<double> store_;
};

// Full selection: the untouched embedding (baselines). Expressed as a
// Selection with mode TopK and k = N_f ordered by band would permute blocks,
// so Full is its own mode here.
Selection selection_fmax();
Selection selection_topk(std::size_t k);
Selection selection_weighted_full();
Selection selection_full();

SequenceBatch problems_to_sequences(const std::vector<Problem>& problems, EmbeddingCache& cache,
                                    std::size_t lo, std::size_t count);

void write_dataset(const std::filesystem::path& dir, const std::string& name,
                   const DatasetSplit& ds);
DatasetSplit read_dataset(const std::filesystem::path& dir, const std::string& name);

}  // namespace gridattn
