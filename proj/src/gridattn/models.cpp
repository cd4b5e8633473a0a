#include "models.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "io.hpp"

namespace gridattn {

void Adam::step(ParamSet& ps) {
  ++t;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (Param* p : ps.items) {
    double* w = p->value.data.data();
    const double* g = p->grad.data.data();
    double* m = p->m.data.data();
    double* v = p->v.data.data();
    std::size_t n = p->value.size();
#pragma omp parallel for
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      double mh = m[i] / bc1;
      double vh = v[i] / bc2;
      w[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
    }
  }
}

void init_uniform_fanin(Param& p, std::size_t fan_in, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : p.value.data) v = rng.uniform(-bound, bound);
}

void init_gaussian(Param& p, double sigma, Rng& rng) {
  for (double& v : p.value.data) v = sigma * rng.normal();
}

// ---------------------------------------------------------------------------
// LSTM

LstmScorer::LstmScorer(std::size_t in_dim, std::size_t hidden, Rng& rng)
    : in_dim_(in_dim),
      hidden_(hidden),
      wx_("lstm.wx", 4 * hidden, in_dim),
      bx_("lstm.bx", 1, 4 * hidden),
      wh_("lstm.wh", 4 * hidden, hidden),
      bh_("lstm.bh", 1, 4 * hidden),
      head_w_("head.w", 1, hidden),
      head_b_("head.b", 1, 1) {
  init_uniform_fanin(wx_, in_dim, rng);
  init_uniform_fanin(bx_, in_dim, rng);
  init_uniform_fanin(wh_, hidden, rng);
  init_uniform_fanin(bh_, hidden, rng);
  init_uniform_fanin(head_w_, hidden, rng);
  init_uniform_fanin(head_b_, hidden, rng);
  for (Param* p : {&wx_, &bx_, &wh_, &bh_, &head_w_, &head_b_}) ps_.add(*p);
}

NodeId LstmScorer::final_hidden(Tape& t, NodeId x, std::size_t num_seq, std::size_t seq_len) {
  if (t.val(x).cols != in_dim_) throw CliError("shape_error", "scorer input dimension mismatch");
  if (t.val(x).rows != num_seq * seq_len)
    throw CliError("shape_error", "scorer input rows mismatch");
  NodeId wx = t.param(&wx_.value, &wx_.grad);
  NodeId bx = t.param(&bx_.value, &bx_.grad);
  NodeId wh = t.param(&wh_.value, &wh_.grad);
  NodeId bh = t.param(&bh_.value, &bh_.grad);
  // One projection for every timestep, then strided per-step slices.
  NodeId xp = t.linear(x, wx, bx);
  NodeId h = t.input(Matrix(num_seq, hidden_));
  NodeId c = t.input(Matrix(num_seq, hidden_));
  std::size_t H = hidden_;
  for (std::size_t step = 0; step < seq_len; ++step) {
    NodeId xt = t.gather_rows_strided(xp, step, seq_len, num_seq);
    NodeId gates = t.add(xt, t.linear(h, wh, bh));
    NodeId ig = t.sigmoid(t.slice_cols(gates, 0, H));
    NodeId fg = t.sigmoid(t.slice_cols(gates, H, H));
    NodeId gg = t.tanh_op(t.slice_cols(gates, 2 * H, H));
    NodeId og = t.sigmoid(t.slice_cols(gates, 3 * H, H));
    c = t.add(t.mul(fg, c), t.mul(ig, gg));
    h = t.mul(og, t.tanh_op(c));
  }
  return h;
}

NodeId LstmScorer::score(Tape& t, NodeId x, std::size_t num_seq, std::size_t seq_len) {
  NodeId h = final_hidden(t, x, num_seq, seq_len);
  NodeId hw = t.param(&head_w_.value, &head_w_.grad);
  NodeId hb = t.param(&head_b_.value, &head_b_.grad);
  return t.linear(h, hw, hb);
}

json LstmScorer::arch() const {
  return json{{"type", "lstm"}, {"input_dim", in_dim_}, {"hidden", hidden_}};
}

// ---------------------------------------------------------------------------
// Transformer

TransformerScorer::Block::Block(std::size_t d, std::size_t ff, int idx)
    : ln1_g("blk" + std::to_string(idx) + ".ln1.g", 1, d),
      ln1_b("blk" + std::to_string(idx) + ".ln1.b", 1, d),
      wq("blk" + std::to_string(idx) + ".wq", d, d),
      bq("blk" + std::to_string(idx) + ".bq", 1, d),
      wk("blk" + std::to_string(idx) + ".wk", d, d),
      bk("blk" + std::to_string(idx) + ".bk", 1, d),
      wv("blk" + std::to_string(idx) + ".wv", d, d),
      bv("blk" + std::to_string(idx) + ".bv", 1, d),
      wo("blk" + std::to_string(idx) + ".wo", d, d),
      bo("blk" + std::to_string(idx) + ".bo", 1, d),
      ln2_g("blk" + std::to_string(idx) + ".ln2.g", 1, d),
      ln2_b("blk" + std::to_string(idx) + ".ln2.b", 1, d),
      w1("blk" + std::to_string(idx) + ".ff1", ff, d),
      b1("blk" + std::to_string(idx) + ".ff1b", 1, ff),
      w2("blk" + std::to_string(idx) + ".ff2", d, ff),
      b2("blk" + std::to_string(idx) + ".ff2b", 1, d) {}

TransformerScorer::TransformerScorer(std::size_t in_dim, std::size_t seq_len, Rng& rng,
                                     std::size_t model_dim, std::size_t heads, std::size_t layers,
                                     std::size_t ff_dim)
    : in_dim_(in_dim),
      seq_len_(seq_len),
      model_dim_(model_dim),
      heads_(heads),
      ff_dim_(ff_dim),
      in_w_("in.w", model_dim, in_dim),
      in_b_("in.b", 1, model_dim),
      ln0_g_("ln0.g", 1, model_dim),
      ln0_b_("ln0.b", 1, model_dim),
      cls_("cls", 1, model_dim),
      pos_("pos", seq_len + 1, model_dim),
      lnf_g_("lnf.g", 1, model_dim),
      lnf_b_("lnf.b", 1, model_dim),
      head_w_("head.w", 1, model_dim),
      head_b_("head.b", 1, 1) {
  if (model_dim % heads != 0) throw CliError("config_error", "model dim must divide into heads");
  init_uniform_fanin(in_w_, in_dim, rng);
  init_uniform_fanin(in_b_, in_dim, rng);
  ln0_g_.value.fill(1.0);
  ln0_b_.value.fill(0.0);
  init_gaussian(cls_, 0.02, rng);
  init_gaussian(pos_, 0.02, rng);
  ps_.add(in_w_);
  ps_.add(in_b_);
  ps_.add(ln0_g_);
  ps_.add(ln0_b_);
  ps_.add(cls_);
  ps_.add(pos_);
  for (std::size_t l = 0; l < layers; ++l) {
    blocks_.push_back(std::make_unique<Block>(model_dim, ff_dim, static_cast<int>(l)));
    Block& b = *blocks_.back();
    for (Param* lp : {&b.ln1_g, &b.ln2_g}) lp->value.fill(1.0);
    init_uniform_fanin(b.wq, model_dim, rng);
    init_uniform_fanin(b.bq, model_dim, rng);
    init_uniform_fanin(b.wk, model_dim, rng);
    init_uniform_fanin(b.bk, model_dim, rng);
    init_uniform_fanin(b.wv, model_dim, rng);
    init_uniform_fanin(b.bv, model_dim, rng);
    init_uniform_fanin(b.wo, model_dim, rng);
    init_uniform_fanin(b.bo, model_dim, rng);
    init_uniform_fanin(b.w1, model_dim, rng);
    init_uniform_fanin(b.b1, model_dim, rng);
    init_uniform_fanin(b.w2, ff_dim, rng);
    init_uniform_fanin(b.b2, ff_dim, rng);
    for (Param* p : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo,
                     &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2})
      ps_.add(*p);
  }
  lnf_g_.value.fill(1.0);
  init_uniform_fanin(head_w_, model_dim, rng);
  init_uniform_fanin(head_b_, model_dim, rng);
  ps_.add(lnf_g_);
  ps_.add(lnf_b_);
  ps_.add(head_w_);
  ps_.add(head_b_);
}

NodeId TransformerScorer::score(Tape& t, NodeId x, std::size_t num_seq, std::size_t seq_len) {
  if (t.val(x).cols != in_dim_) throw CliError("shape_error", "scorer input dimension mismatch");
  if (seq_len != seq_len_) throw CliError("shape_error", "scorer built for a different seq_len");
  if (t.val(x).rows != num_seq * seq_len)
    throw CliError("shape_error", "scorer input rows mismatch");
  constexpr double kEps = 1e-5;
  NodeId h = t.linear(x, t.param(&in_w_.value, &in_w_.grad), t.param(&in_b_.value, &in_b_.grad));
  h = t.layer_norm(h, t.param(&ln0_g_.value, &ln0_g_.grad), t.param(&ln0_b_.value, &ln0_b_.grad),
                   kEps);
  h = t.prepend_rows(h, t.param(&cls_.value, &cls_.grad), seq_len);
  h = t.add_timewise(h, t.param(&pos_.value, &pos_.grad));
  std::size_t T1 = seq_len + 1;
  for (auto& bp : blocks_) {
    Block& b = *bp;
    NodeId a_in = t.layer_norm(h, t.param(&b.ln1_g.value, &b.ln1_g.grad),
                               t.param(&b.ln1_b.value, &b.ln1_b.grad), kEps);
    NodeId q = t.linear(a_in, t.param(&b.wq.value, &b.wq.grad), t.param(&b.bq.value, &b.bq.grad));
    NodeId kk = t.linear(a_in, t.param(&b.wk.value, &b.wk.grad), t.param(&b.bk.value, &b.bk.grad));
    NodeId v = t.linear(a_in, t.param(&b.wv.value, &b.wv.grad), t.param(&b.bv.value, &b.bv.grad));
    NodeId att = t.self_attention(q, kk, v, heads_, T1);
    h = t.add(h, t.linear(att, t.param(&b.wo.value, &b.wo.grad), t.param(&b.bo.value, &b.bo.grad)));
    NodeId f_in = t.layer_norm(h, t.param(&b.ln2_g.value, &b.ln2_g.grad),
                               t.param(&b.ln2_b.value, &b.ln2_b.grad), kEps);
    NodeId ff = t.relu(
        t.linear(f_in, t.param(&b.w1.value, &b.w1.grad), t.param(&b.b1.value, &b.b1.grad)));
    h = t.add(h, t.linear(ff, t.param(&b.w2.value, &b.w2.grad), t.param(&b.b2.value, &b.b2.grad)));
  }
  h = t.layer_norm(h, t.param(&lnf_g_.value, &lnf_g_.grad), t.param(&lnf_b_.value, &lnf_b_.grad),
                   kEps);
  NodeId cls_out = t.gather_rows_strided(h, 0, T1, num_seq);
  return t.linear(cls_out, t.param(&head_w_.value, &head_w_.grad),
                  t.param(&head_b_.value, &head_b_.grad));
}

json TransformerScorer::arch() const {
  return json{{"type", "transformer"}, {"input_dim", in_dim_},   {"seq_len", seq_len_},
              {"model_dim", model_dim_}, {"heads", heads_},
              {"layers", blocks_.size()}, {"ff_dim", ff_dim_}};
}

// ---------------------------------------------------------------------------
// TCN encoder

TcnEncoder::TcnEncoder(std::size_t in_dim, Rng& rng, std::size_t units)
    : in_dim_(in_dim),
      units_(units),
      w1_("tcn.w1", units, in_dim),
      b1_("tcn.b1", 1, units),
      w2_("tcn.w2", units, units),
      b2_("tcn.b2", 1, units),
      w3_("tcn.w3", units, units),
      b3_("tcn.b3", 1, units),
      gain_("tcn.gain", 1, units),
      shift_("tcn.shift", 1, units) {
  init_uniform_fanin(w1_, in_dim, rng);
  init_uniform_fanin(b1_, in_dim, rng);
  init_uniform_fanin(w2_, units, rng);
  init_uniform_fanin(b2_, units, rng);
  init_uniform_fanin(w3_, units, rng);
  init_uniform_fanin(b3_, units, rng);
  gain_.value.fill(1.0);
  shift_.value.fill(0.0);
  for (Param* p : {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_, &gain_, &shift_}) ps_.add(*p);
}

NodeId TcnEncoder::encode(Tape& t, NodeId x, std::size_t group) {
  NodeId h =
      t.relu(t.linear(x, t.param(&w1_.value, &w1_.grad), t.param(&b1_.value, &b1_.grad)));
  h = t.relu(t.linear(h, t.param(&w2_.value, &w2_.grad), t.param(&b2_.value, &b2_.grad)));
  h = t.linear(h, t.param(&w3_.value, &w3_.grad), t.param(&b3_.value, &b3_.grad));
  return t.group_norm_rows(h, t.param(&gain_.value, &gain_.grad),
                           t.param(&shift_.value, &shift_.grad), group, 1e-8);
}

json TcnEncoder::arch() const {
  return json{{"type", "tcn"}, {"input_dim", in_dim_}, {"units", units_}};
}

// ---------------------------------------------------------------------------
// Ablation embedder

AblationEmbedder::AblationEmbedder(std::size_t code_len, Rng& rng, std::size_t units)
    : code_len_(code_len),
      units_(units),
      w1_("emb.w1", units, 2 * code_len),
      b1_("emb.b1", 1, units),
      w2_("emb.w2", units, units),
      b2_("emb.b2", 1, units),
      w3_("emb.w3", units, units),
      b3_("emb.b3", 1, units) {
  init_uniform_fanin(w1_, 2 * code_len, rng);
  init_uniform_fanin(b1_, 2 * code_len, rng);
  init_uniform_fanin(w2_, units, rng);
  init_uniform_fanin(b2_, units, rng);
  init_uniform_fanin(w3_, units, rng);
  init_uniform_fanin(b3_, units, rng);
  for (Param* p : {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_}) ps_.add(*p);
}

NodeId AblationEmbedder::embed(Tape& t, NodeId codes) {
  NodeId h =
      t.relu(t.linear(codes, t.param(&w1_.value, &w1_.grad), t.param(&b1_.value, &b1_.grad)));
  h = t.relu(t.linear(h, t.param(&w2_.value, &w2_.grad), t.param(&b2_.value, &b2_.grad)));
  return t.sigmoid(t.linear(h, t.param(&w3_.value, &w3_.grad), t.param(&b3_.value, &b3_.grad)));
}

json AblationEmbedder::arch() const {
  return json{{"type", "ablation_embedder"}, {"code_len", code_len_}, {"units", units_}};
}

std::vector<double> coordinate_code(Point p, std::size_t code_len, double sigma) {
  std::vector<double> code(2 * code_len, 0.0);
  auto fill = [&](std::int64_t coord, std::size_t off) {
    if (coord < 0 || static_cast<std::size_t>(coord) >= code_len)
      throw CliError("coverage_error", "coordinate outside ablation code range",
                     json{{"coord", coord}, {"code_len", code_len}});
    if (sigma <= 0.0) {
      code[off + static_cast<std::size_t>(coord)] = 1.0;
      return;
    }
    double z = 0.0;
    for (std::size_t i = 0; i < code_len; ++i) {
      double d = (static_cast<double>(i) - static_cast<double>(coord)) / sigma;
      double v = std::exp(-0.5 * d * d);
      code[off + i] = v;
      z += v;
    }
    for (std::size_t i = 0; i < code_len; ++i) code[off + i] /= z;
  };
  fill(p.x, 0);
  fill(p.y, code_len);
  return code;
}

// ---------------------------------------------------------------------------
// Regression head

RegressionHead::RegressionHead(std::size_t in_dim, std::size_t out_dim, Rng& rng)
    : in_dim_(in_dim), out_dim_(out_dim), w_("regr.w", out_dim, in_dim), b_("regr.b", 1, out_dim) {
  init_uniform_fanin(w_, in_dim, rng);
  init_uniform_fanin(b_, in_dim, rng);
  ps_.add(w_);
  ps_.add(b_);
}

NodeId RegressionHead::predict(Tape& t, NodeId h) {
  return t.sigmoid(t.linear(h, t.param(&w_.value, &w_.grad), t.param(&b_.value, &b_.grad)));
}

json RegressionHead::arch() const {
  return json{{"type", "regression_head"}, {"input_dim", in_dim_}, {"out_dim", out_dim_}};
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, const ParamSet& ps, const json& meta) {
  json header = meta;
  json plist = json::array();
  for (const Param* p : ps.items)
    plist.push_back(json{{"name", p->name}, {"rows", p->value.rows}, {"cols", p->value.cols}});
  header["params"] = plist;
  std::string out = header.dump();
  out += '\n';
  for (const Param* p : ps.items) {
    const char* bytes = reinterpret_cast<const char*>(p->value.data.data());
    out.append(bytes, p->value.size() * sizeof(double));
  }
  write_file_atomic(path, out);
}

json load_checkpoint(const std::filesystem::path& path, ParamSet& ps) {
  std::string text = read_file(path);
  std::size_t nl = text.find('\n');
  if (nl == std::string::npos) throw CliError("format_error", "checkpoint missing header");
  json header = json::parse(text.substr(0, nl));
  const json& plist = header.at("params");
  if (plist.size() != ps.items.size())
    throw CliError("format_error", "checkpoint parameter count mismatch",
                   json{{"expected", ps.items.size()}, {"found", plist.size()}});
  std::size_t off = nl + 1;
  for (std::size_t i = 0; i < ps.items.size(); ++i) {
    Param& p = *ps.items[i];
    const json& e = plist[i];
    if (e.at("name").get<std::string>() != p.name || e.at("rows").get<std::size_t>() != p.value.rows ||
        e.at("cols").get<std::size_t>() != p.value.cols)
      throw CliError("format_error", "checkpoint parameter mismatch", json{{"param", p.name}});
    std::size_t bytes = p.value.size() * sizeof(double);
    if (off + bytes > text.size()) throw CliError("format_error", "checkpoint truncated");
    std::memcpy(p.value.data.data(), text.data() + off, bytes);
    off += bytes;
  }
  return header;
}

std::vector<Matrix> snapshot_values(const ParamSet& ps) {
  std::vector<Matrix> snap;
  snap.reserve(ps.items.size());
  for (const Param* p : ps.items) snap.push_back(p->value);
  return snap;
}

void restore_values(ParamSet& ps, const std::vector<Matrix>& snap) {
  if (snap.size() != ps.items.size())
    throw CliError("config_error", "snapshot size mismatch");
  for (std::size_t i = 0; i < snap.size(); ++i) ps.items[i]->value = snap[i];
}

}  // namespace gridattn
