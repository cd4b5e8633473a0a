#include "tasks.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_set>

#include "io.hpp"
#include "rng.hpp"

namespace gridattn {
namespace {

const char* kind_name(RegionKind k) {
  switch (k) {
    case RegionKind::Training:
      return "training";
    case RegionKind::Translation:
      return "translation";
    case RegionKind::Scaling:
      return "scaling";
    case RegionKind::ArithmeticRegion:
      return "arithmetic";
  }
  return "?";
}

RegionKind kind_from_name(const std::string& s) {
  if (s == "training") return RegionKind::Training;
  if (s == "translation") return RegionKind::Translation;
  if (s == "scaling") return RegionKind::Scaling;
  if (s == "arithmetic") return RegionKind::ArithmeticRegion;
  throw CliError("format_error", "unknown region kind: " + s);
}

struct TupleHash {
  std::size_t operator()(const std::array<std::int64_t, 6>& t) const {
    std::uint64_t h = 0x9e3779b97f4a7c15ULL;
    for (std::int64_t v : t) h = splitmix64(h ^ static_cast<std::uint64_t>(v));
    return static_cast<std::size_t>(h);
  }
};
using TupleSet = std::unordered_set<std::array<std::int64_t, 6>, TupleHash>;

// Uniform anchor coordinate valid for displacement d within [0, m-1].
std::int64_t anchor_coord(Rng& rng, std::int64_t d, std::int64_t m) {
  std::int64_t lo = std::max<std::int64_t>(0, -d);
  std::int64_t hi = m - 1 - std::max<std::int64_t>(0, d);
  return rng.uniform_int(lo, hi);
}

Point sample_in(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return {rng.uniform_int(lo, hi), rng.uniform_int(lo, hi)};
}

// Six mutually distinct foils inside [lo,hi]^2, none equal to the answer.
std::array<Point, 6> sample_foils(Rng& rng, std::int64_t lo, std::int64_t hi, Point answer) {
  if ((hi - lo + 1) * (hi - lo + 1) < 7)
    throw CliError("config_error", "region too small to hold 6 distinct foils");
  std::array<Point, 6> foils;
  for (std::size_t i = 0; i < 6; ++i) {
    for (;;) {
      Point f = sample_in(rng, lo, hi);
      if (f == answer) continue;
      bool dup = false;
      for (std::size_t j = 0; j < i; ++j) dup |= (foils[j] == f);
      if (!dup) {
        foils[i] = f;
        break;
      }
    }
  }
  return foils;
}

// Place the answer among the foils in a uniformly shuffled slot order.
void place_candidates(Rng& rng, Problem& p, Point answer, const std::array<Point, 6>& foils) {
  p.candidates[0] = answer;
  for (std::size_t i = 0; i < 6; ++i) p.candidates[i + 1] = foils[i];
  std::array<int, 7> slot = {0, 1, 2, 3, 4, 5, 6};
  rng.shuffle(slot.data(), 7);
  std::array<Point, 7> shuffled;
  for (std::size_t i = 0; i < 7; ++i) shuffled[i] = p.candidates[static_cast<std::size_t>(slot[i])];
  p.candidates = shuffled;
  for (int i = 0; i < 7; ++i)
    if (slot[static_cast<std::size_t>(i)] == 0) p.target_index = i;
}

// Count of unique (displacement, A, C) analogy tuples for side m.
double analogy_tuple_count(std::int64_t m) {
  double per_axis = static_cast<double>(m) * static_cast<double>(m);
  for (std::int64_t k = 1; k < m; ++k) per_axis += 2.0 * static_cast<double>(k) * static_cast<double>(k);
  return per_axis * per_axis;
}

// One analogy (A,B,C,D) with all four points in [0,m-1]^2; returns the
// dedup tuple through `key`.
void draw_analogy(Rng& rng, std::int64_t m, Point& a, Point& b, Point& c, Point& d,
                  std::array<std::int64_t, 6>& key) {
  std::int64_t vx = rng.uniform_int(-(m - 1), m - 1);
  std::int64_t vy = rng.uniform_int(-(m - 1), m - 1);
  a = {anchor_coord(rng, vx, m), anchor_coord(rng, vy, m)};
  c = {anchor_coord(rng, vx, m), anchor_coord(rng, vy, m)};
  b = {a.x + vx, a.y + vy};
  d = {c.x + vx, c.y + vy};
  key = {vx, vy, a.x, a.y, c.x, c.y};
}

std::int64_t apply_op(int op, std::int64_t a, std::int64_t b) { return op == 0 ? a + b : a * b; }

}  // namespace

std::int64_t Region::lo() const {
  switch (kind) {
    case RegionKind::Training:
      return 0;
    case RegionKind::Translation:
    case RegionKind::ArithmeticRegion:
      return static_cast<std::int64_t>(k) * m;
    case RegionKind::Scaling:
      return 0;
  }
  return 0;
}

std::int64_t Region::hi() const {
  switch (kind) {
    case RegionKind::Training:
      return m - 1;
    case RegionKind::Translation:
    case RegionKind::ArithmeticRegion:
      return static_cast<std::int64_t>(k + 1) * m - 1;
    case RegionKind::Scaling:
      return static_cast<std::int64_t>(k) * m - 1;
  }
  return 0;
}

json Region::to_json() const { return json{{"kind", kind_name(kind)}, {"k", k}, {"m", m}}; }

Region Region::from_json(const json& j) {
  Region r;
  r.kind = kind_from_name(j.at("kind").get<std::string>());
  r.k = j.at("k").get<int>();
  r.m = j.at("m").get<std::int64_t>();
  return r;
}

json Problem::to_json() const {
  json ctx = json::array();
  for (const Point& p : context) ctx.push_back({p.x, p.y});
  json cands = json::array();
  for (const Point& p : candidates) cands.push_back({p.x, p.y});
  json j{{"ctx", ctx}, {"cand", cands}, {"target", target_index}, {"region", region.to_json()}};
  if (op >= 0) j["op"] = op;
  return j;
}

Problem Problem::from_json(const json& j) {
  Problem p;
  for (const auto& q : j.at("ctx")) p.context.push_back({q.at(0).get<std::int64_t>(), q.at(1).get<std::int64_t>()});
  const auto& cands = j.at("cand");
  if (cands.size() != 7) throw CliError("format_error", "problem must have 7 candidates");
  for (std::size_t i = 0; i < 7; ++i)
    p.candidates[i] = {cands[i].at(0).get<std::int64_t>(), cands[i].at(1).get<std::int64_t>()};
  p.target_index = j.at("target").get<int>();
  if (p.target_index < 0 || p.target_index >= 7)
    throw CliError("format_error", "target index out of range");
  p.op = j.value("op", -1);
  p.region = Region::from_json(j.at("region"));
  return p;
}

DatasetSplit gen_analogy_training(std::int64_t m, std::size_t n_train, std::size_t n_val,
                                  std::uint64_t seed) {
  if (m < 3) throw CliError("config_error", "training square side must be at least 3");
  double total = analogy_tuple_count(m);
  if (static_cast<double>(n_train + n_val) > total)
    throw CliError("config_error", "requested analogy count exceeds the number of unique problems",
                   json{{"requested", n_train + n_val}, {"available", total}});
  Rng rng(seed);
  TupleSet seen;
  seen.reserve(2 * (n_train + n_val));
  Region reg{RegionKind::Training, 0, m};
  std::vector<Problem> all;
  all.reserve(n_train + n_val);
  while (all.size() < n_train + n_val) {
    Point a, b, c, d;
    std::array<std::int64_t, 6> key;
    draw_analogy(rng, m, a, b, c, d, key);
    if (!seen.insert(key).second) continue;
    Problem p;
    p.context = {a, b, c};
    p.region = reg;
    place_candidates(rng, p, d, sample_foils(rng, 0, m - 1, d));
    all.push_back(std::move(p));
  }
  DatasetSplit ds;
  ds.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.validation.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
  ds.manifest = json{{"task", "analogy"}, {"m", m},      {"n_train", n_train},
                     {"n_val", n_val},    {"seed", seed}};
  return ds;
}

std::map<int, std::vector<Problem>> gen_analogy_tests(std::int64_t m, int k_lo, int k_hi,
                                                      std::size_t n_per_region, Regime regime,
                                                      std::int64_t coverage, std::uint64_t seed) {
  if (k_lo < 1 || k_hi < k_lo) throw CliError("config_error", "bad test region range");
  std::map<int, std::vector<Problem>> out;
  for (int k = k_lo; k <= k_hi; ++k) {
    Region reg{regime == Regime::Translation ? RegionKind::Translation : RegionKind::Scaling, k, m};
    if (reg.hi() >= coverage)
      throw CliError("config_error", "test region exceeds codebook coverage",
                     json{{"k", k}, {"hi", reg.hi()}, {"coverage", coverage}});
    Rng rng(splitmix64(seed + static_cast<std::uint64_t>(k)));
    std::vector<Problem>& problems = out[k];
    problems.reserve(n_per_region);
    for (std::size_t i = 0; i < n_per_region; ++i) {
      Point a, b, c, d;
      std::array<std::int64_t, 6> key;
      draw_analogy(rng, m, a, b, c, d, key);
      auto tf = [&](Point p) -> Point {
        if (regime == Regime::Translation) {
          std::int64_t s = static_cast<std::int64_t>(k) * m;
          return {p.x + s, p.y + s};
        }
        return {p.x * k, p.y * k};
      };
      Problem p;
      p.context = {tf(a), tf(b), tf(c)};
      p.region = reg;
      Point target = tf(d);
      place_candidates(rng, p, target, sample_foils(rng, reg.lo(), reg.hi(), target));
      problems.push_back(std::move(p));
    }
  }
  return out;
}

namespace {

// Coordinates (a, b) uniform over [lo_ab, hi_ab]^2 conditioned on
// op(a, b) within [lo_c, hi_c]. Factorized per-dimension rejection is exact
// because the constraint and the prior both factor across dimensions.
void sample_op_coord(Rng& rng, int op, std::int64_t lo_ab, std::int64_t hi_ab, std::int64_t lo_c,
                     std::int64_t hi_c, std::int64_t& a, std::int64_t& b, std::size_t& attempts) {
  constexpr std::size_t kCap = 1u << 22;
  for (std::size_t it = 0; it < kCap; ++it) {
    ++attempts;
    a = rng.uniform_int(lo_ab, hi_ab);
    b = rng.uniform_int(lo_ab, hi_ab);
    std::int64_t c = apply_op(op, a, b);
    if (c >= lo_c && c <= hi_c) return;
  }
  throw CliError("sampling_error", "arithmetic rejection sampling failed to find a valid operand pair",
                 json{{"op", op == 0 ? "add" : "mul"},
                      {"operand_range", {lo_ab, hi_ab}},
                      {"answer_range", {lo_c, hi_c}}});
}

Problem draw_arithmetic(Rng& rng, int op, std::int64_t lo_ab, std::int64_t hi_ab, Region reg,
                        TupleSet* seen, std::size_t& attempts) {
  for (;;) {
    Point a, b;
    sample_op_coord(rng, op, lo_ab, hi_ab, reg.lo(), reg.hi(), a.x, b.x, attempts);
    sample_op_coord(rng, op, lo_ab, hi_ab, reg.lo(), reg.hi(), a.y, b.y, attempts);
    if (seen && !seen->insert({a.x, a.y, b.x, b.y, op, 0}).second) continue;
    Point c{apply_op(op, a.x, b.x), apply_op(op, a.y, b.y)};
    Problem p;
    p.context = {a, b};
    p.op = op;
    p.region = reg;
    place_candidates(rng, p, c, sample_foils(rng, reg.lo(), reg.hi(), c));
    return p;
  }
}

}  // namespace

DatasetSplit gen_arithmetic(std::int64_t m, std::size_t n_train, std::size_t n_val,
                            std::size_t n_per_region, int k_lo, int k_hi, std::int64_t coverage,
                            std::uint64_t seed) {
  if (n_train % 2 || n_val % 2 || n_per_region % 2)
    throw CliError("config_error", "arithmetic counts must be even for equal op balance");
  if (k_lo < 1 || k_hi < k_lo) throw CliError("config_error", "bad test region range");
  if (static_cast<std::int64_t>(k_hi + 1) * m > coverage)
    throw CliError("config_error", "last arithmetic region exceeds codebook coverage");
  DatasetSplit ds;
  Rng rng(seed);
  TupleSet seen;
  Region train_reg{RegionKind::Training, 0, m};
  std::size_t attempts = 0;
  std::size_t ntot = n_train + n_val;
  for (std::size_t i = 0; i < ntot; ++i) {
    // Alternating ops keep counts balanced within both splits.
    Problem p = draw_arithmetic(rng, static_cast<int>(i % 2), 0, m - 1, train_reg, &seen, attempts);
    (i < n_train ? ds.train : ds.validation).push_back(std::move(p));
  }
  std::size_t test_attempts = 0;
  for (int k = k_lo; k <= k_hi; ++k) {
    Region reg{RegionKind::ArithmeticRegion, k, m};
    Rng rr(splitmix64(seed + 0x517cc1b727220a95ULL + static_cast<std::uint64_t>(k)));
    std::vector<Problem>& problems = ds.tests[k];
    for (std::size_t i = 0; i < n_per_region; ++i)
      problems.push_back(
          draw_arithmetic(rr, static_cast<int>(i % 2), 0, coverage - 1, reg, nullptr, test_attempts));
  }
  ds.manifest = json{{"task", "arithmetic"}, {"m", m},
                     {"n_train", n_train},   {"n_val", n_val},
                     {"n_per_region", n_per_region}, {"k_lo", k_lo},
                     {"k_hi", k_hi},         {"coverage", coverage},
                     {"seed", seed},
                     {"sampler_attempts", json{{"train", attempts}, {"test", test_attempts}}}};
  return ds;
}

EmbeddingCache::EmbeddingCache(const GridCodebook& cb, const AttentionWeights* attention,
                               Selection sel)
    : cb_(cb), attention_(attention), sel_(sel) {
  dim_ = sel_.dim(cb.config.num_frequencies, cb.config.num_phases);
  if (sel_.mode != SelectionMode::Full && attention_ == nullptr)
    throw CliError("config_error", "embedding selection requires fitted attention weights");
}

const double* EmbeddingCache::get(Point p) {
  std::uint64_t key = (static_cast<std::uint64_t>(p.x) << 32) | static_cast<std::uint64_t>(p.y);
  auto it = index_.find(key);
  if (it == index_.end()) {
    std::vector<double> full = encode(cb_, p);
    std::vector<double> row = sel_.mode == SelectionMode::Full
                                  ? std::move(full)
                                  : select_embedding(full, *attention_, cb_.config.num_phases, sel_);
    std::size_t idx = store_.size() / dim_;
    store_.insert(store_.end(), row.begin(), row.end());
    it = index_.emplace(key, idx).first;
  }
  return store_.data() + it->second * dim_;
}

Selection selection_fmax() { return Selection{SelectionMode::FMax, 1}; }
Selection selection_topk(std::size_t k) { return Selection{SelectionMode::TopK, k}; }
Selection selection_weighted_full() { return Selection{SelectionMode::WeightedFull, 1}; }
Selection selection_full() { return Selection{SelectionMode::Full, 1}; }

SequenceBatch problems_to_sequences(const std::vector<Problem>& problems, EmbeddingCache& cache,
                                    std::size_t lo, std::size_t count) {
  if (lo + count > problems.size()) throw CliError("config_error", "batch range out of bounds");
  if (count == 0) throw CliError("config_error", "empty batch");
  SequenceBatch b;
  b.num_problems = count;
  std::size_t ctx = problems[lo].context.size();
  bool has_op = problems[lo].op >= 0;
  b.seq_len = ctx + 1;
  b.dim = cache.dim() + (has_op ? 2 : 0);
  b.x = Matrix(count * 7 * b.seq_len, b.dim);
  b.targets.resize(count);
  for (std::size_t p = 0; p < count; ++p) {
    const Problem& pr = problems[lo + p];
    if (pr.context.size() != ctx || (pr.op >= 0) != has_op)
      throw CliError("config_error", "mixed problem shapes in one batch");
    b.targets[p] = pr.target_index;
    // Warm the cache serially; rows are copied below.
    for (const Point& q : pr.context) cache.get(q);
    for (const Point& q : pr.candidates) cache.get(q);
    for (std::size_t c = 0; c < 7; ++c) {
      for (std::size_t t = 0; t < b.seq_len; ++t) {
        Point q = t < ctx ? pr.context[t] : pr.candidates[c];
        double* row = b.x.row((p * 7 + c) * b.seq_len + t);
        const double* e = cache.get(q);
        std::copy(e, e + cache.dim(), row);
        if (has_op) {
          row[cache.dim()] = pr.op == 0 ? 1.0 : 0.0;
          row[cache.dim() + 1] = pr.op == 1 ? 1.0 : 0.0;
        }
      }
    }
  }
  return b;
}

namespace {

void write_problems(const std::filesystem::path& path, const std::vector<Problem>& ps) {
  std::string out;
  for (const Problem& p : ps) {
    out += p.to_json().dump();
    out += '\n';
  }
  write_file_atomic(path, out);
}

std::vector<Problem> read_problems(const std::filesystem::path& path) {
  std::string text = read_file(path);
  std::vector<Problem> ps;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    if (nl > pos) ps.push_back(Problem::from_json(json::parse(text.substr(pos, nl - pos))));
    pos = nl + 1;
  }
  return ps;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const std::string& name,
                   const DatasetSplit& ds) {
  std::filesystem::create_directories(dir);
  write_problems(dir / (name + "_train.jsonl"), ds.train);
  write_problems(dir / (name + "_val.jsonl"), ds.validation);
  json manifest = ds.manifest;
  json regions = json::array();
  for (const auto& [k, ps] : ds.tests) {
    regions.push_back(k);
    write_problems(dir / (name + "_test_k" + std::to_string(k) + ".jsonl"), ps);
  }
  manifest["regions"] = regions;
  manifest["counts"] = json{{"train", ds.train.size()}, {"validation", ds.validation.size()}};
  write_file_atomic(dir / (name + "_manifest.json"), manifest.dump(2) + "\n");
}

DatasetSplit read_dataset(const std::filesystem::path& dir, const std::string& name) {
  DatasetSplit ds;
  ds.manifest = json::parse(read_file(dir / (name + "_manifest.json")));
  ds.train = read_problems(dir / (name + "_train.jsonl"));
  ds.validation = read_problems(dir / (name + "_val.jsonl"));
  for (const auto& k : ds.manifest.at("regions"))
    ds.tests[k.get<int>()] = read_problems(dir / (name + "_test_k" + std::to_string(k.get<int>()) + ".jsonl"));
  return ds;
}

}  // namespace gridattn
