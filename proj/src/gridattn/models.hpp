#pragma once
#include <memory>
#include <string>
#include <vector>

#include "dppa.hpp"
#include "rng.hpp"
#include "tape.hpp"

namespace gridattn {

// Trainable tensor plus its gradient accumulator and optimizer moments.
struct Param {
  std::string name;
  Matrix value, grad, m, v;
  Param(std::string n, std::size_t r, std::size_t c)
      : name(std::move(n)), value(r, c), grad(r, c), m(r, c), v(r, c) {}
};

struct ParamSet {
  std::vector<Param*> items;
  void add(Param& p) { items.push_back(&p); }
  void add_all(const ParamSet& o) { items.insert(items.end(), o.items.begin(), o.items.end()); }
  void zero_grad() {
    for (Param* p : items) p->grad.fill(0.0);
  }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const Param* p : items) n += p->value.size();
    return n;
  }
};

// Bias-corrected adaptive-moment update; moments live in the params.
struct Adam {
  AdamConfig cfg;
  std::int64_t t = 0;
  void step(ParamSet& ps);
};

void init_uniform_fanin(Param& p, std::size_t fan_in, Rng& rng);
void init_gaussian(Param& p, double sigma, Rng& rng);

// A model that maps candidate sequences to one score per sequence.
class Scorer {
 public:
  virtual ~Scorer() = default;
  // x holds num_seq sequences of seq_len consecutive rows; returns (num_seq, 1).
  virtual NodeId score(Tape& t, NodeId x, std::size_t num_seq, std::size_t seq_len) = 0;
  virtual ParamSet& params() = 0;
  virtual json arch() const = 0;
  virtual std::size_t input_dim() const = 0;
};

// Single-layer LSTM; state starts at zero for every sequence; linear 1-unit
// head on the final hidden state.
class LstmScorer : public Scorer {
 public:
  LstmScorer(std::size_t in_dim, std::size_t hidden, Rng& rng);
  NodeId score(Tape& t, NodeId x, std::size_t num_seq, std::size_t seq_len) override;
  // Final hidden state (num_seq, hidden) — the regression pathway.
  NodeId final_hidden(Tape& t, NodeId x, std::size_t num_seq, std::size_t seq_len);
  ParamSet& params() override { return ps_; }
  json arch() const override;
  std::size_t input_dim() const override { return in_dim_; }
  std::size_t hidden() const { return hidden_; }

 private:
  std::size_t in_dim_, hidden_;
  Param wx_, bx_, wh_, bh_, head_w_, head_b_;
  ParamSet ps_;
};

// Pre-norm transformer encoder: input projection + per-feature normalization,
// learned classification token and positional rows, 1-unit head on the
// transformed classification token.
class TransformerScorer : public Scorer {
 public:
  TransformerScorer(std::size_t in_dim, std::size_t seq_len, Rng& rng, std::size_t model_dim = 128,
                    std::size_t heads = 8, std::size_t layers = 6, std::size_t ff_dim = 512);
  NodeId score(Tape& t, NodeId x, std::size_t num_seq, std::size_t seq_len) override;
  ParamSet& params() override { return ps_; }
  json arch() const override;
  std::size_t input_dim() const override { return in_dim_; }

 private:
  struct Block {
    Param ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Param ln2_g, ln2_b, w1, b1, w2, b2;
    Block(std::size_t d, std::size_t ff, int idx);
  };
  std::size_t in_dim_, seq_len_, model_dim_, heads_, ff_dim_;
  Param in_w_, in_b_, ln0_g_, ln0_b_, cls_, pos_;
  std::vector<std::unique_ptr<Block>> blocks_;
  Param lnf_g_, lnf_b_, head_w_, head_b_;
  ParamSet ps_;
};

// Two rectified 256-unit layers and a linear 256-unit output, followed by
// per-feature normalization across the items of each candidate sequence.
class TcnEncoder {
 public:
  TcnEncoder(std::size_t in_dim, Rng& rng, std::size_t units = 256);
  NodeId encode(Tape& t, NodeId x, std::size_t group);
  ParamSet& params() { return ps_; }
  json arch() const;
  std::size_t out_dim() const { return units_; }

 private:
  std::size_t in_dim_, units_;
  Param w1_, b1_, w2_, b2_, w3_, b3_, gain_, shift_;
  ParamSet ps_;
};

// Replaces the grid code: per-coordinate codes (one-hot or normalized Gaussian
// bump) through two rectified 1024-unit layers and a 1024-unit logistic layer.
class AblationEmbedder {
 public:
  AblationEmbedder(std::size_t code_len, Rng& rng, std::size_t units = 1024);
  NodeId embed(Tape& t, NodeId codes);  // codes: (n, 2*code_len)
  ParamSet& params() { return ps_; }
  json arch() const;
  std::size_t code_len() const { return code_len_; }
  std::size_t out_dim() const { return units_; }

 private:
  std::size_t code_len_, units_;
  Param w1_, b1_, w2_, b2_, w3_, b3_;
  ParamSet ps_;
};

// Coordinate code for the ablation embedder: x-code then y-code, each of
// length code_len; sigma <= 0 emits a plain one-hot, otherwise an L1-normalized
// Gaussian bump centered on the coordinate.
std::vector<double> coordinate_code(Point p, std::size_t code_len, double sigma);

// Linear layer with logistic squashing.
class RegressionHead {
 public:
  RegressionHead(std::size_t in_dim, std::size_t out_dim, Rng& rng);
  NodeId predict(Tape& t, NodeId h);
  ParamSet& params() { return ps_; }
  json arch() const;
  std::size_t out_dim() const { return out_dim_; }

 private:
  std::size_t in_dim_, out_dim_;
  Param w_, b_;
  ParamSet ps_;
};

// Checkpoints: one JSON header line (meta + parameter shapes) followed by the
// raw little-endian values of every parameter in registry order.
void save_checkpoint(const std::filesystem::path& path, const ParamSet& ps, const json& meta);
json load_checkpoint(const std::filesystem::path& path, ParamSet& ps);
// Snapshot/restore parameter values in memory (best-epoch bookkeeping).
std::vector<Matrix> snapshot_values(const ParamSet& ps);
void restore_values(ParamSet& ps, const std::vector<Matrix>& snap);

}  // namespace gridattn
