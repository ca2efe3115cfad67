#pragma once

// The semi-supervised loop: batch composition, one optimization step over both
// students, EMA of the teacher, periodic validation, checkpoints and the run log.
//
// All randomness is keyed by (seed, iteration, item slot), so a run resumed from
// a checkpoint replays exactly the batches and augmentations it would have seen.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "dstcs/augmentation.hpp"
#include "dstcs/config.hpp"
#include "dstcs/core.hpp"
#include "dstcs/losses.hpp"
#include "dstcs/metrics.hpp"
#include "dstcs/models.hpp"
#include "dstcs/optim.hpp"
#include "dstcs/phantom.hpp"
#include "dstcs/rng.hpp"

namespace dstcs {

namespace streams {
inline constexpr std::uint64_t kLabeledPool = 0x4c41424cULL;
inline constexpr std::uint64_t kUnlabeledPool = 0x554e4c42ULL;
inline constexpr std::uint64_t kAugment = 0x41554758ULL;
inline constexpr std::uint64_t kDropStudent1 = 0x44533100ULL;
inline constexpr std::uint64_t kDropStudent2 = 0x44533200ULL;
inline constexpr std::uint64_t kDropTeacher = 0x44535400ULL;
}  // namespace streams

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  std::vector<int> labeled;
  std::vector<int> unlabeled;
  friend bool operator==(const Batch&, const Batch&) = default;
};

namespace detail {

inline std::vector<int> draw_many(const std::vector<int>& pool, std::uint64_t seed, std::uint64_t tag, long iteration,
                                  int count) {
  std::vector<int> out;
  if (pool.empty() || count <= 0) return out;
  out.reserve(count);
  // One permutation per epoch; recompute only when the epoch changes.
  std::uint64_t cached_epoch = std::numeric_limits<std::uint64_t>::max();
  std::vector<int> perm;
  for (int j = 0; j < count; ++j) {
    const std::uint64_t pos = static_cast<std::uint64_t>(iteration) * count + j;
    const std::uint64_t epoch = pos / pool.size();
    if (epoch != cached_epoch) {
      perm = pool;
      Rng rng = make_rng(seed, {tag, epoch});
      shuffle(perm, rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % pool.size()]);
  }
  return out;
}

}  // namespace detail

/// Labeled and unlabeled ids for one iteration. With an empty unlabeled pool the
/// whole batch is drawn from the labeled pool.
inline Batch compose_batch(const DatasetSplit& split, long iteration, std::uint64_t seed, int batch_size,
                           int labeled_per_batch) {
  if (split.labeled_ids.empty()) throw ConfigError("compose_batch: labeled pool is empty");
  if (iteration < 0) throw ConfigError("compose_batch: negative iteration");
  const bool has_unlabeled = !split.unlabeled_ids.empty();
  const int nl = has_unlabeled ? labeled_per_batch : batch_size;
  const int nu = has_unlabeled ? batch_size - labeled_per_batch : 0;
  return {detail::draw_many(split.labeled_ids, seed, streams::kLabeledPool, iteration, nl),
          detail::draw_many(split.unlabeled_ids, seed, streams::kUnlabeledPool, iteration, nu)};
}

inline Batch compose_batch(const DatasetSplit& split, long iteration, const RunConfig& cfg) {
  return compose_batch(split, iteration, cfg.seed, cfg.batch_size, cfg.labeled_per_batch);
}

// ---------------------------------------------------------------------------
// Training state

struct EvalSummary {
  long iteration = -1;
  double dsc_ps = 0, dsc_fh = 0, dsc_psfh = 0;
  double asd_psfh = 0, hd95_psfh = 0;
  int missed = 0;

  static EvalSummary from(long iteration, const EvaluationReport& r) {
    return {iteration, r.ps.dsc, r.fh.dsc, r.psfh_dsc(), r.psfh_asd(), r.psfh_hd95(), r.images_with_miss};
  }
  friend bool operator==(const EvalSummary&, const EvalSummary&) = default;
};

/// Running sums of the per-step loss bundles between two log lines.
struct LossAccumulator {
  long steps = 0;
  LossBundle s1{}, s2{};
  double lr = 0;

  void add(const LossBundle& a, const LossBundle& b, double rate) {
    auto acc = [](LossBundle& dst, const LossBundle& src) {
      dst.l_sup += src.l_sup, dst.l_h += src.l_h, dst.l_s += src.l_s;
      dst.l_cdd += src.l_cdd, dst.l_cr += src.l_cr, dst.l_total += src.l_total;
    };
    acc(s1, a);
    acc(s2, b);
    lr += rate;
    ++steps;
  }
  LossBundle mean1() const { return scaled(s1); }
  LossBundle mean2() const { return scaled(s2); }
  double mean_lr() const { return steps ? lr / steps : 0.0; }
  void reset() { *this = LossAccumulator{}; }

 private:
  LossBundle scaled(const LossBundle& b) const {
    const double k = steps ? 1.0 / steps : 0.0;
    return {b.l_sup * k, b.l_h * k, b.l_s * k, b.l_cdd * k, b.l_cr * k, b.l_total * k};
  }
};

struct TrainState {
  RunConfig config;
  ModelTriple models;
  Sgd opt1, opt2;
  long iteration = 0;
  EvalSummary initial{};
  EvalSummary best{};
  LossAccumulator pending{};

  TrainState(const RunConfig& cfg, int input_size)
      : config(cfg),
        models(cfg.model_config(input_size)),
        opt1(models.student1->parameters(), cfg.momentum, cfg.weight_decay),
        opt2(models.student2->parameters(), cfg.momentum, cfg.weight_decay) {}
};

struct StepResult {
  LossBundle student1;
  LossBundle student2;
  double lr = 0;
  bool used_unlabeled = false;
};

// ---------------------------------------------------------------------------
// One step

namespace detail {

template <std::floating_point T>
void axpy(ProbabilityMap<T>& dst, T a, const ProbabilityMap<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += a * src[i];
}

inline LossBundle checked_total(const LossComponents& c, const LossWeights& w, const char* who, long iteration) {
  try {
    return total_loss(c, w);
  } catch (const NonFiniteLossError& e) {
    throw NonFiniteLossError(std::string(e.what()) + " for " + who + " at iteration " + std::to_string(iteration));
  }
}

inline const Segmenter& pick(const ModelTriple& m, EvalModel which) {
  switch (which) {
    case EvalModel::student2: return *m.student2;
    case EvalModel::teacher: return *m.teacher;
    default: return *m.student1;
  }
}

}  // namespace detail

/// Augmented views of one batch item.
struct AugmentedItem {
  Image geometric;      // after flip/rotation only
  Image base;           // geometric + photometric corruption (student2 input)
  Image student1;       // base with EPIS restoration (or base when EPIS is off)
  LabelMask label;      // transformed ground truth, or the teacher pseudo-label
  std::uint64_t teacher_noise_seed = 0;
};

inline StepResult train_step(TrainState& st, const Corpus& corpus, const Batch& batch) {
  const RunConfig& cfg = st.config;
  const long it = st.iteration;
  const LossWeights& w = cfg.loss;
  const SegmentationDice dice{cfg.nw_dice, cfg.nw};
  const bool use_unlabeled = !batch.unlabeled.empty() && w.unlabeled_terms_active();

  std::vector<int> ids = batch.labeled;
  if (use_unlabeled) ids.insert(ids.end(), batch.unlabeled.begin(), batch.unlabeled.end());
  const int nl = static_cast<int>(batch.labeled.size());
  const int n = static_cast<int>(ids.size());
  const int nu = n - nl;
  if (nl == 0) throw ConfigError("train_step: batch has no labeled items");

  // Geometry and photometric corruption.
  std::vector<AugmentedItem> items(n);
  for (int j = 0; j < n; ++j) {
    const auto& src = corpus.at(ids[j]).pair;
    Rng rng = make_rng(cfg.seed, {streams::kAugment, static_cast<std::uint64_t>(it), static_cast<std::uint64_t>(j)});
    GeometricTransform g = GeometricTransform::sample(rng, cfg.rotation_deg);
    if (!cfg.flip) g.flip = false;
    const std::uint64_t photo_seed = rng();
    items[j].teacher_noise_seed = rng();
    items[j].geometric = g.apply(src.image);
    items[j].base = photometric_augment(items[j].geometric, cfg.noise, photo_seed);
    if (j < nl) items[j].label = g.apply(src.mask);
  }

  // Teacher pass on unlabeled items: noise + dropout (the sigma' perturbation).
  std::vector<ProbabilityMap<double>> pt(n);
  if (nu > 0) {
    std::vector<Image> noisy;
    noisy.reserve(nu);
    for (int j = nl; j < n; ++j) noisy.push_back(perturb(items[j].geometric, cfg.noise, items[j].teacher_noise_seed));
    std::vector<const Image*> ptrs;
    for (const auto& im : noisy) ptrs.push_back(&im);
    const nn::ForwardMode mode{true, derive_seed(cfg.seed, {streams::kDropTeacher, static_cast<std::uint64_t>(it)})};
    const nn::Tensor logits = st.models.teacher->forward(to_tensor(ptrs), mode);
    for (int j = nl; j < n; ++j) {
      pt[j] = probabilities<double>(logits, j - nl);
      items[j].label = argmax(pt[j]);
    }
  }

  const PatchGrid grid{cfg.patch_size};
  for (auto& item : items)
    item.student1 = cfg.epis ? epis_augment(item.geometric, item.label, item.base, grid) : item.base;

  std::vector<const Image*> in1, in2;
  for (const auto& item : items) in1.push_back(&item.student1), in2.push_back(&item.base);
  const nn::ForwardMode mode1{true, derive_seed(cfg.seed, {streams::kDropStudent1, static_cast<std::uint64_t>(it)})};
  const nn::ForwardMode mode2{true, derive_seed(cfg.seed, {streams::kDropStudent2, static_cast<std::uint64_t>(it)})};
  const nn::Tensor logits1 = st.models.student1->forward(to_tensor(in1), mode1);
  const nn::Tensor logits2 = st.models.student2->forward(to_tensor(in2), mode2);

  std::vector<ProbabilityMap<double>> p1(n), p2(n), g1(n), g2(n);
  for (int j = 0; j < n; ++j) {
    p1[j] = probabilities<double>(logits1, j);
    p2[j] = probabilities<double>(logits2, j);
    g1[j] = ProbabilityMap<double>(p1[j].rows(), p1[j].cols(), p1[j].classes());
    g2[j] = g1[j];
  }

  LossComponents c1, c2;
  ProbabilityMap<double> ga, gb;
  const double inv_l = 1.0 / nl, inv_n = 1.0 / n, inv_u = nu ? 1.0 / nu : 0.0;

  for (int j = 0; j < nl; ++j) {
    c1.l_sup += inv_l * supervised_loss(p1[j], items[j].label, &ga, dice);
    detail::axpy(g1[j], inv_l, ga);
    c2.l_sup += inv_l * supervised_loss(p2[j], items[j].label, &gb, dice);
    detail::axpy(g2[j], inv_l, gb);
  }
  for (int j = nl; j < n; ++j) {
    c1.l_h += inv_u * hard_cross_supervision(p1[j], p2[j], &ga, dice);
    detail::axpy(g1[j], w.alpha * inv_u, ga);
    c2.l_h += inv_u * hard_cross_supervision(p2[j], p1[j], &gb, dice);
    detail::axpy(g2[j], w.alpha * inv_u, gb);
    c1.l_cr += inv_u * soft_consistency(p1[j], pt[j], &ga);
    detail::axpy(g1[j], w.mu * inv_u, ga);
  }
  for (int j = 0; j < n; ++j) {
    c1.l_s += inv_n * soft_consistency(p1[j], sharpen(p2[j], w.tau), &ga);
    detail::axpy(g1[j], w.beta * inv_n, ga);
    c2.l_s += inv_n * soft_consistency(p2[j], sharpen(p1[j], w.tau), &gb);
    detail::axpy(g2[j], w.beta * inv_n, gb);
    const double cdd = cdd_loss(p1[j], p2[j], &ga, &gb);
    c1.l_cdd += inv_n * cdd;
    detail::axpy(g1[j], w.gamma * inv_n, ga);
    detail::axpy(g2[j], w.gamma * inv_n, gb);
  }
  c2.l_cdd = c1.l_cdd;

  StepResult res;
  res.student1 = detail::checked_total(c1, w, "student1", it);
  res.student2 = detail::checked_total(c2, w, "student2", it);
  res.lr = learning_rate(cfg.schedule, cfg.lr, it, cfg.iterations, cfg.poly_power);
  res.used_unlabeled = use_unlabeled;

  nn::Tensor d1(logits1.n(), logits1.c(), logits1.h(), logits1.w());
  nn::Tensor d2(logits2.n(), logits2.c(), logits2.h(), logits2.w());
  for (int j = 0; j < n; ++j) {
    store_gradient(d1, j, softmax_backward(p1[j], g1[j]));
    store_gradient(d2, j, softmax_backward(p2[j], g2[j]));
  }
  st.models.student1->zero_grad();
  st.models.student1->backward(d1);
  st.models.student2->zero_grad();
  st.models.student2->backward(d2);
  st.opt1.step(st.models.student1->parameters(), res.lr);
  st.opt2.step(st.models.student2->parameters(), res.lr);
  ema_update(st.models, cfg.ema_decay);
  ++st.iteration;
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

inline EvaluationReport evaluate_ids(Segmenter& model, const Corpus& corpus, const std::vector<int>& ids,
                                     double spacing = 1.0) {
  std::vector<std::tuple<int, const Image&, const LabelMask&>> items;
  items.reserve(ids.size());
  for (int id : ids) {
    const auto& p = corpus.at(id).pair;
    items.emplace_back(id, p.image, p.mask);
  }
  return evaluate_corpus(items, [&](const Image& im) { return argmax(predict(model, im)); }, spacing);
}

inline Segmenter& eval_network(ModelTriple& m, EvalModel which) {
  return const_cast<Segmenter&>(detail::pick(m, which));
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'T', 'C', 'S', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_eval(std::ostream& os, const EvalSummary& e) {
  put<std::int64_t>(os, e.iteration);
  for (double v : {e.dsc_ps, e.dsc_fh, e.dsc_psfh, e.asd_psfh, e.hd95_psfh}) put<double>(os, v);
  put<std::int32_t>(os, e.missed);
}

inline EvalSummary get_eval(std::istream& is) {
  EvalSummary e;
  e.iteration = get<std::int64_t>(is);
  for (double* v : {&e.dsc_ps, &e.dsc_fh, &e.dsc_psfh, &e.asd_psfh, &e.hd95_psfh}) *v = get<double>(is);
  e.missed = get<std::int32_t>(is);
  return e;
}

inline void put_bundle(std::ostream& os, const LossBundle& b) {
  for (double v : {b.l_sup, b.l_h, b.l_s, b.l_cdd, b.l_cr, b.l_total}) put<double>(os, v);
}

inline LossBundle get_bundle(std::istream& is) {
  LossBundle b;
  for (double* v : {&b.l_sup, &b.l_h, &b.l_s, &b.l_cdd, &b.l_cr, &b.l_total}) *v = get<double>(is);
  return b;
}

inline void put_velocity(std::ostream& os, const Sgd& opt) {
  put<std::uint64_t>(os, opt.velocity().size());
  for (const auto& v : opt.velocity()) {
    put<std::uint64_t>(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  }
}

inline void get_velocity(std::istream& is, Sgd& opt) {
  auto& vel = opt.velocity();
  if (get<std::uint64_t>(is) != vel.size()) throw ShapeError("checkpoint optimizer state does not match the model");
  for (auto& v : vel) {
    if (get<std::uint64_t>(is) != v.size()) throw ShapeError("checkpoint optimizer tensor size mismatch");
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (!is) throw Error("unexpected end of checkpoint stream");
  }
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const TrainState& st) {
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::int64_t>(os, st.iteration);
  detail::put<std::int32_t>(os, st.models.student1->input_size());
  detail::put_string(os, to_text(st.config));
  detail::put_eval(os, st.initial);
  detail::put_eval(os, st.best);
  detail::put<std::int64_t>(os, st.pending.steps);
  detail::put<double>(os, st.pending.lr);
  detail::put_bundle(os, st.pending.s1);
  detail::put_bundle(os, st.pending.s2);
  write_parameters(os, *st.models.student1);
  write_parameters(os, *st.models.student2);
  write_parameters(os, *st.models.teacher);
  detail::put_velocity(os, st.opt1);
  detail::put_velocity(os, st.opt2);
}

inline TrainState read_checkpoint(std::istream& is) {
  char magic[sizeof kCheckpointMagic];
  is.read(magic, sizeof magic);
  if (!is || !std::equal(magic, magic + sizeof magic, kCheckpointMagic)) throw Error("not a checkpoint file (bad magic)");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  const auto iteration = detail::get<std::int64_t>(is);
  const auto input_size = detail::get<std::int32_t>(is);
  const RunConfig cfg = parse_config(detail::get_string(is));
  TrainState st(cfg, input_size);
  st.iteration = iteration;
  st.initial = detail::get_eval(is);
  st.best = detail::get_eval(is);
  st.pending.steps = detail::get<std::int64_t>(is);
  st.pending.lr = detail::get<double>(is);
  st.pending.s1 = detail::get_bundle(is);
  st.pending.s2 = detail::get_bundle(is);
  read_parameters(is, *st.models.student1);
  read_parameters(is, *st.models.student2);
  read_parameters(is, *st.models.teacher);
  detail::get_velocity(is, st.opt1);
  detail::get_velocity(is, st.opt2);
  return st;
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& st) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint '" + tmp.string() + "' at iteration " + std::to_string(st.iteration));
    write_checkpoint(out, st);
    if (!out) throw Error("write failed for checkpoint '" + tmp.string() + "' at iteration " + std::to_string(st.iteration));
  }
  std::filesystem::rename(tmp, path);
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  try {
    return read_checkpoint(in);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Run log

inline constexpr const char* kLogColumns =
    "iteration\tlr\tl_sup\tl_h\tl_s\tl_cdd\tl_cr\tl_total\ts2_l_sup\ts2_l_h\ts2_l_s\ts2_l_total"
    "\tval_dsc_ps\tval_dsc_fh\tval_dsc_psfh\tval_asd_psfh\tval_hd95_psfh\tval_missed";

inline std::string eval_fields(const EvalSummary& e) {
  std::ostringstream os;
  os << std::setprecision(9) << e.dsc_ps << '\t' << e.dsc_fh << '\t' << e.dsc_psfh << '\t' << e.asd_psfh << '\t'
     << e.hd95_psfh << '\t' << e.missed;
  return os.str();
}

inline std::string log_row(long iteration, const LossAccumulator& acc, const EvalSummary& e) {
  const LossBundle a = acc.mean1(), b = acc.mean2();
  std::ostringstream os;
  os << std::setprecision(12) << iteration << '\t' << acc.mean_lr() << '\t' << a.l_sup << '\t' << a.l_h << '\t'
     << a.l_s << '\t' << a.l_cdd << '\t' << a.l_cr << '\t' << a.l_total << '\t' << b.l_sup << '\t' << b.l_h << '\t'
     << b.l_s << '\t' << b.l_total << '\t' << eval_fields(e);
  return os.str();
}

struct LogRow {
  long iteration = 0;
  std::map<std::string, double> values;
};

struct RunLog {
  std::vector<std::string> config_lines;  // "key = value"
  std::vector<std::string> columns;
  std::vector<LogRow> rows;
};

/// Parses a run log written by run_training(); errors carry the offending line number.
inline RunLog parse_run_log(std::istream& in) {
  RunLog log;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.starts_with("# config ")) {
      log.config_lines.push_back(line.substr(9));
      continue;
    }
    if (line.starts_with("#")) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    for (std::string f; std::getline(ls, f, '\t');) fields.push_back(f);
    if (log.columns.empty()) {
      if (fields.empty() || fields.front() != "iteration")
        throw Error("malformed log at line " + std::to_string(lineno) + ": expected column header");
      log.columns = fields;
      continue;
    }
    if (fields.size() != log.columns.size())
      throw Error("malformed log at line " + std::to_string(lineno) + ": expected " +
                  std::to_string(log.columns.size()) + " fields, got " + std::to_string(fields.size()));
    LogRow row;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      const double v = detail::parse_double("line " + std::to_string(lineno), fields[i]);
      if (i == 0) row.iteration = static_cast<long>(v);
      row.values[log.columns[i]] = v;
    }
    log.rows.push_back(std::move(row));
  }
  if (log.columns.empty()) throw Error("malformed log: no column header found");
  return log;
}

// ---------------------------------------------------------------------------
// Full run

struct TrainOptions {
  std::filesystem::path out_dir;          // empty: keep everything in memory
  std::optional<std::filesystem::path> resume_from;
  long stop_after = -1;                   // stop once this iteration count is reached (simulated interruption)
  std::ostream* progress = nullptr;
};

struct TrainingResult {
  EvalSummary initial;
  EvalSummary best;
  EvalSummary final_eval;
  std::vector<std::string> log_rows;
  TrainState state;
};

namespace detail {

inline void validate_for_corpus(const RunConfig& cfg, const Corpus& corpus) {
  cfg.validate();
  if (corpus.items.empty()) throw Error("training corpus is empty");
  const int size = corpus.rows();
  if (corpus.cols() != size) throw ConfigError("training requires square images");
  if (size % 8) throw ConfigError("image size must be a multiple of 8 for the networks");
  if (size % cfg.patch_size) throw ConfigError("augment.patch_size must divide the image size");
}

/// Keeps the header and the rows with iteration <= upto; used when resuming.
inline std::vector<std::string> truncate_log(const std::filesystem::path& path, long upto) {
  std::vector<std::string> kept;
  std::ifstream in(path);
  if (!in) return kept;
  bool header_seen = false;
  for (std::string line; std::getline(in, line);) {
    if (line.starts_with("#") || !header_seen) {
      kept.push_back(line);
      if (!line.starts_with("#")) header_seen = true;
      continue;
    }
    const auto tab = line.find('\t');
    if (std::stol(line.substr(0, tab)) <= upto) kept.push_back(line);
  }
  return kept;
}

}  // namespace detail

inline TrainingResult run_training(const RunConfig& config, const Corpus& corpus, const TrainOptions& opt = {}) {
  namespace fs = std::filesystem;
  TrainState st = opt.resume_from ? load_checkpoint(*opt.resume_from) : TrainState(config, corpus.rows());
  const RunConfig& cfg = st.config;
  detail::validate_for_corpus(cfg, corpus);
  if (st.models.student1->input_size() != corpus.rows())
    throw ShapeError("checkpoint input size " + std::to_string(st.models.student1->input_size()) +
                     " does not match corpus image size " + std::to_string(corpus.rows()));

  const DatasetSplit split = make_split(static_cast<int>(corpus.items.size()), cfg.labeled_ratio, cfg.split_seed);
  if (split.unlabeled_ids.empty() && cfg.loss.unlabeled_terms_active() && opt.progress)
    *opt.progress << "warning: unlabeled pool is empty; unlabeled loss terms are skipped\n";

  const bool to_disk = !opt.out_dir.empty();
  if (to_disk) fs::create_directories(opt.out_dir);
  const fs::path log_path = opt.out_dir / "train_log.tsv";

  auto evaluate = [&](long iteration) {
    return EvalSummary::from(iteration, evaluate_ids(eval_network(st.models, cfg.eval_model), corpus, split.val_ids,
                                                     cfg.spacing));
  };

  std::vector<std::string> rows;
  EvalSummary final_eval;
  std::ofstream log;
  if (!opt.resume_from) {
    st.initial = evaluate(0);
    st.best = st.initial;
    if (to_disk) {
      log.open(log_path, std::ios::trunc);
      if (!log) throw Error("cannot write log '" + log_path.string() + "' at iteration 0");
      log << "# dstcs training log\n";
      std::istringstream cfg_text(to_text(cfg));
      for (std::string line; std::getline(cfg_text, line);) log << "# config " << line << '\n';
      log << "# split labeled=" << split.labeled_ids.size() << " unlabeled=" << split.unlabeled_ids.size()
          << " val=" << split.val_ids.size() << " test=" << split.test_ids.size() << '\n';
      log << "# initial\t" << eval_fields(st.initial) << '\n';
      log << kLogColumns << '\n';
      save_checkpoint(opt.out_dir / "best.bin", st);
    }
  } else if (to_disk) {
    const auto kept = detail::truncate_log(log_path, st.iteration);
    log.open(log_path, std::ios::trunc);
    if (!log) throw Error("cannot write log '" + log_path.string() + "' at iteration " + std::to_string(st.iteration));
    for (const auto& l : kept) log << l << '\n';
  }
  if (opt.progress)
    *opt.progress << "iteration " << st.iteration << ": val PSFH-DSC " << std::setprecision(4)
                  << (opt.resume_from ? st.best.dsc_psfh : st.initial.dsc_psfh) << '\n';

  EvalSummary last = st.best.iteration == st.iteration ? st.best : EvalSummary{};
  const long stop = opt.stop_after >= 0 ? std::min(opt.stop_after, cfg.iterations) : cfg.iterations;
  while (st.iteration < stop) {
    const Batch batch = compose_batch(split, st.iteration, cfg);
    const StepResult r = train_step(st, corpus, batch);
    st.pending.add(r.student1, r.student2, r.lr);

    if (st.iteration % cfg.eval_every == 0 || st.iteration == cfg.iterations) {
      last = evaluate(st.iteration);
      const std::string row = log_row(st.iteration, st.pending, last);
      rows.push_back(row);
      st.pending.reset();
      if (to_disk) {
        log << row << '\n' << std::flush;
        if (!log) throw Error("log write failed at iteration " + std::to_string(st.iteration));
      }
      const bool improved = last.dsc_psfh > st.best.dsc_psfh;
      if (improved) st.best = last;
      if (to_disk && improved) save_checkpoint(opt.out_dir / "best.bin", st);
      if (opt.progress)
        *opt.progress << "iteration " << st.iteration << ": loss " << std::setprecision(4) << r.student1.l_total
                      << " val PSFH-DSC " << last.dsc_psfh << '\n';
    }
    if (to_disk && st.iteration % cfg.checkpoint_every == 0)
      save_checkpoint(opt.out_dir / ("ckpt_" + std::to_string(st.iteration) + ".bin"), st);
  }

  if (st.iteration >= cfg.iterations) {
    final_eval = last.iteration == st.iteration ? last : evaluate(st.iteration);
    if (to_disk) save_checkpoint(opt.out_dir / "final.bin", st);
  }
  const EvalSummary initial = st.initial, best = st.best;
  return {initial, best, final_eval, std::move(rows), std::move(st)};
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepPoint {
  std::string name;
  double labeled_ratio = 0.2;
  std::array<double, kNumClasses> class_weights{1.0, 2.0, 1.0};
  int radius = 5;
  friend bool operator==(const SweepPoint&, const SweepPoint&) = default;
};

struct SweepRow {
  SweepPoint point;
  EvaluationReport test;
  EvalSummary best_val;
};

inline std::string point_name(const std::array<double, kNumClasses>& cw, int r) {
  std::ostringstream os;
  os << "class_weight=[" << std::fixed << std::setprecision(1) << cw[0] << ',' << cw[1] << ',' << cw[2]
     << "], r=" << r;
  return os.str();
}

/// Named grids: "best" is the single best published setting, "weights-radius" the
/// published list of class-weight and radius settings (its repeated row appears once).
inline std::vector<SweepPoint> sweep_preset(const std::string& name, double labeled_ratio = 0.2) {
  using W = std::array<double, kNumClasses>;
  std::vector<std::pair<W, int>> pts;
  if (name == "best") {
    pts = {{{1.0, 2.0, 1.0}, 5}};
  } else if (name == "weights-radius") {
    pts = {{{1.0, 1.5, 1.0}, 5}, {{1.0, 1.0, 1.0}, 5}, {{1.0, 3.0, 1.0}, 5}, {{1.0, 1.5, 1.0}, 7}, {{0.5, 1.5, 1.0}, 7},
           {{1.0, 2.0, 1.0}, 5}, {{1.0, 2.0, 1.0}, 3}, {{1.0, 2.0, 1.0}, 7}, {{0.5, 1.5, 1.0}, 7}};
  } else {
    throw ConfigError("unknown sweep preset '" + name + "' (known: best, weights-radius)");
  }
  std::vector<SweepPoint> out;
  for (const auto& [w, r] : pts) {
    SweepPoint p{point_name(w, r), labeled_ratio, w, r};
    if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
  }
  return out;
}

/// Cartesian class_weights x radius grid at a fixed labeled ratio; duplicates are dropped.
inline std::vector<SweepPoint> weight_radius_grid(const std::vector<std::array<double, kNumClasses>>& weights,
                                                  const std::vector<int>& radii, double labeled_ratio) {
  std::vector<SweepPoint> out;
  for (const auto& cw : weights)
    for (int r : radii) {
      SweepPoint p{point_name(cw, r), labeled_ratio, cw, r};
      if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
    }
  return out;
}

inline std::vector<SweepPoint> ratio_grid(std::vector<double> ratios, const RunConfig& base) {
  for (double r : ratios)
    if (!(r > 0 && r <= 1)) throw ConfigError("annotation ratios must lie in (0, 1]");
  std::sort(ratios.begin(), ratios.end());
  ratios.erase(std::unique(ratios.begin(), ratios.end()), ratios.end());
  std::vector<SweepPoint> out;
  for (double r : ratios) {
    std::ostringstream os;
    os << "labeled_ratio=" << r;
    out.push_back({os.str(), r, base.nw.class_weights, base.nw.radius});
  }
  return out;
}

/// One full run per point with the shared seed; each point is evaluated on the test split.
inline std::vector<SweepRow> run_sweep(const RunConfig& base, const Corpus& corpus, const std::vector<SweepPoint>& grid,
                                       const std::filesystem::path& out_dir = {}, std::ostream* progress = nullptr) {
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  std::vector<SweepRow> out;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    RunConfig cfg = base;
    cfg.labeled_ratio = grid[i].labeled_ratio;
    cfg.nw.class_weights = grid[i].class_weights;
    cfg.nw.radius = grid[i].radius;
    TrainOptions opt;
    if (!out_dir.empty()) opt.out_dir = out_dir / ("point_" + std::to_string(i));
    if (progress) *progress << "sweep point " << i + 1 << "/" << grid.size() << ": " << grid[i].name << '\n';
    auto res = run_training(cfg, corpus, opt);
    const DatasetSplit split = make_split(static_cast<int>(corpus.items.size()), cfg.labeled_ratio, cfg.split_seed);
    auto& model = eval_network(res.state.models, cfg.eval_model);
    out.push_back({grid[i], evaluate_ids(model, corpus, split.test_ids, cfg.spacing), res.best});
  }
  return out;
}

inline constexpr const char* kSweepColumns =
    "setting\tlabeled_ratio\tclass_weights\tr\tdsc_ps\tdsc_fh\tdsc_psfh\tasd_ps\tasd_fh\tasd_psfh\thd95_ps\thd95_fh"
    "\thd95_psfh\tlossing";

inline void write_sweep_table(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << kSweepColumns << '\n' << std::setprecision(9);
  for (const auto& r : rows) {
    const auto& t = r.test;
    os << r.point.name << '\t' << r.point.labeled_ratio << '\t' << detail::fmt_weights(r.point.class_weights) << '\t'
       << r.point.radius << '\t' << t.ps.dsc << '\t' << t.fh.dsc << '\t' << t.psfh_dsc() << '\t' << t.ps.asd << '\t'
       << t.fh.asd << '\t' << t.psfh_asd() << '\t' << t.ps.hd95 << '\t' << t.fh.hd95 << '\t' << t.psfh_hd95() << '\t'
       << t.images_with_miss << '\n';
  }
}

/// The human-readable (PS/FH/PSFH) table, one row per point.
inline void write_sweep_report(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << kReportHeader << '\n';
  for (const auto& r : rows) os << report_row(r.point.name, r.test) << '\n';
}

}  // namespace dstcs
