// dstcs: phantom data generation, training, evaluation, sweeps and plot data.
//
// Exit codes: 0 success, 1 domain error, 2 usage error.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dstcs/config.hpp"
#include "dstcs/metrics.hpp"
#include "dstcs/phantom.hpp"
#include "dstcs/training.hpp"

namespace fs = std::filesystem;
using namespace dstcs;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config_path;
  std::string out;
};

std::string keys_footer() {
  std::ostringstream os;
  const RunConfig defaults;
  os << "Config keys (published defaults; set in --config files or as --<key> VALUE on train/evaluate/sweep):\n";
  for (const auto& k : config_keys()) os << "  " << std::left << std::setw(22) << k.name << k.get(defaults) << "  " << k.help << '\n';
  return os.str();
}

/// Registers `--<key> VALUE` for every config key; values are applied after --config.
void add_overrides(CLI::App* cmd, std::map<std::string, std::string>& overrides) {
  const RunConfig defaults;
  for (const auto& k : config_keys()) {
    const std::string name = k.name;
    cmd->add_option_function<std::string>(
           "--" + name, [&overrides, name](const std::string& v) { overrides[name] = v; },
           k.help + " (default: " + k.get(defaults) + ")")
        ->group("Config keys");
  }
}

RunConfig resolve_config(const Globals& g, const std::string& preset, const std::map<std::string, std::string>& overrides) {
  RunConfig cfg;
  if (preset == "desk") cfg = desk_preset();
  else if (!preset.empty() && preset != "full") throw ConfigError("unknown config preset '" + preset + "' (known: full, desk)");
  if (!g.config_path.empty()) cfg = load_config(g.config_path, cfg);
  for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
  if (g.seed) cfg.seed = *g.seed;
  cfg.validate();
  return cfg;
}

fs::path out_dir(const Globals& g, const char* fallback) { return g.out.empty() ? fs::path(fallback) : fs::path(g.out); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------

int cmd_generate(const Globals& g, PhantomSpec spec, int count, const std::vector<std::string>& spec_kv,
                 double labeled_ratio, std::uint64_t split_seed) {
  for (const auto& kv : spec_kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--phantom expects KEY=VALUE, got '" + kv + "'");
    spec.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) spec.seed = *g.seed;
  if (count < 0) throw ConfigError("--count must be non-negative");
  const fs::path dir = out_dir(g, "corpus");
  const Corpus corpus = generate_corpus(spec, count, labeled_ratio, split_seed);
  save_corpus(corpus, dir);
  const Corpus check = load_corpus(dir);  // validates sizes and checksums
  if (check.items.size() != corpus.items.size()) throw Error("corpus verification failed in '" + dir.string() + "'");

  const auto hist = class_histogram(corpus);
  const double total = static_cast<double>(hist[0] + hist[1] + hist[2]);
  std::cout << "wrote " << count << " items to " << dir.string() << '\n';
  const char* names[] = {"background", "PS", "FH"};
  for (int k = 0; k < kNumClasses; ++k)
    std::cout << "  " << std::left << std::setw(11) << names[k] << std::right << std::setw(12) << hist[k] << "  "
              << std::fixed << std::setprecision(4) << (total > 0 ? hist[k] / total : 0.0) << '\n';
  return 0;
}

int cmd_train(const Globals& g, const RunConfig& cfg, const std::string& corpus_dir, const std::string& resume) {
  const Corpus corpus = load_corpus(corpus_dir);
  const fs::path dir = out_dir(g, "run");
  fs::create_directories(dir);
  TrainOptions opt;
  opt.out_dir = dir;
  opt.progress = &std::cerr;
  if (!resume.empty()) opt.resume_from = fs::path(resume);
  else write_text(dir / "config.txt", to_text(cfg));
  const auto res = run_training(cfg, corpus, opt);
  const auto& f = res.final_eval;
  std::cout << std::fixed << std::setprecision(4) << "final iteration " << f.iteration << " val DSC(PS/FH/PSFH) "
            << f.dsc_ps << '/' << f.dsc_fh << '/' << f.dsc_psfh << " ASD(PSFH) " << f.asd_psfh << " HD95(PSFH) "
            << f.hd95_psfh << " missed " << f.missed << " | initial PSFH-DSC " << res.initial.dsc_psfh
            << " best " << res.best.dsc_psfh << " @" << res.best.iteration << '\n';
  return 0;
}

std::vector<int> split_ids(const DatasetSplit& s, const std::string& which) {
  if (which == "val") return s.val_ids;
  if (which == "test") return s.test_ids;
  if (which == "labeled") return s.labeled_ids;
  if (which == "unlabeled") return s.unlabeled_ids;
  if (which == "all") {
    std::vector<int> all;
    for (const auto* v : {&s.labeled_ids, &s.unlabeled_ids, &s.val_ids, &s.test_ids}) all.insert(all.end(), v->begin(), v->end());
    std::sort(all.begin(), all.end());
    return all;
  }
  throw ConfigError("--split must be one of val, test, labeled, unlabeled, all");
}

int cmd_evaluate(const Globals& g, const std::string& checkpoint, const std::string& corpus_dir, const std::string& which,
                 bool oracle, const std::map<std::string, std::string>& overrides) {
  const Corpus corpus = load_corpus(corpus_dir);
  std::optional<TrainState> st;
  RunConfig cfg;
  if (!checkpoint.empty()) {
    st.emplace(load_checkpoint(checkpoint));
    cfg = st->config;
  } else if (!oracle) {
    throw ConfigError("evaluate needs --checkpoint (or --oracle)");
  }
  if (!g.config_path.empty()) cfg = load_config(g.config_path, cfg);
  for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
  if (st && st->models.student1->input_size() != corpus.rows())
    throw ShapeError("checkpoint input size " + std::to_string(st->models.student1->input_size()) +
                     " does not match corpus image size " + std::to_string(corpus.rows()));

  const DatasetSplit split = make_split(static_cast<int>(corpus.items.size()), cfg.labeled_ratio, cfg.split_seed);
  const std::vector<int> ids = split_ids(split, which);
  EvaluationReport rep;
  std::string name;
  if (oracle) {
    std::vector<std::tuple<int, const Image&, const LabelMask&>> items;
    for (int id : ids) items.emplace_back(id, corpus.at(id).pair.image, corpus.at(id).pair.mask);
    std::size_t k = 0;
    rep = evaluate_corpus(items, [&](const Image&) { return corpus.at(ids[k++]).pair.mask; }, cfg.spacing);
    name = "oracle";
  } else {
    rep = evaluate_ids(eval_network(st->models, cfg.eval_model), corpus, ids, cfg.spacing);
    name = fs::path(checkpoint).stem().string();
  }

  const fs::path dir = out_dir(g, "eval");
  fs::create_directories(dir);
  std::ostringstream table;
  table << kReportHeader << '\n' << report_row(name, rep) << '\n';
  write_text(dir / "report.tsv", table.str());
  std::ofstream rec(dir / "records.tsv", std::ios::trunc);
  if (!rec) throw Error("cannot write '" + (dir / "records.tsv").string() + "'");
  write_image_records(rec, rep);
  std::cout << table.str() << "images " << rep.images << " (" << which << " split), missed structures in "
            << rep.images_with_miss << " images\n";
  return 0;
}

std::array<double, kNumClasses> parse_weight_arg(const std::string& s) {
  return detail::parse_weights("--weights", s);
}

int cmd_sweep(const Globals& g, const RunConfig& cfg, const std::string& corpus_dir, const std::string& preset,
              const std::vector<std::string>& weights, const std::vector<int>& radii, const std::vector<double>& ratios) {
  const Corpus corpus = load_corpus(corpus_dir);
  std::vector<SweepPoint> grid;
  const bool has_grid = !weights.empty() || !radii.empty();
  if ((!preset.empty()) + has_grid + (!ratios.empty()) > 1)
    throw ConfigError("choose one of --grid, --weights/--radii or --ratios");
  if (!preset.empty()) {
    grid = sweep_preset(preset, cfg.labeled_ratio);
  } else if (!ratios.empty()) {
    grid = ratio_grid(ratios, cfg);
  } else {
    std::vector<std::array<double, kNumClasses>> ws;
    for (const auto& w : weights) ws.push_back(parse_weight_arg(w));
    if (ws.empty()) ws.push_back(cfg.nw.class_weights);
    grid = weight_radius_grid(ws, radii.empty() ? std::vector<int>{cfg.nw.radius} : radii, cfg.labeled_ratio);
  }
  const fs::path dir = out_dir(g, "sweep");
  fs::create_directories(dir);
  const auto rows = run_sweep(cfg, corpus, grid, dir, &std::cerr);
  std::ostringstream data, report;
  write_sweep_table(data, rows);
  write_sweep_report(report, rows);
  write_text(dir / "sweep.tsv", data.str());
  write_text(dir / "sweep_report.tsv", report.str());
  std::cout << report.str();
  return 0;
}

// ---------------------------------------------------------------------------

struct Series {
  std::string name, x_label, y_label;
  std::vector<std::pair<double, double>> points;
};

void emit(std::ostream& os, const std::vector<Series>& series) {
  for (const auto& s : series) {
    os << "# series " << s.name << "\n# x=" << s.x_label << " y=" << s.y_label << '\n' << std::setprecision(10);
    for (const auto& [x, y] : s.points) os << x << '\t' << y << '\n';
    os << '\n';
  }
}

/// Averages duplicate x values and sorts, so x is strictly increasing.
std::vector<std::pair<double, double>> collapse(const std::map<double, std::pair<double, int>>& acc) {
  std::vector<std::pair<double, double>> out;
  for (const auto& [x, s] : acc) out.emplace_back(x, s.first / s.second);
  return out;
}

std::vector<Series> series_from_sweep(std::istream& in, const std::string& path) {
  std::string line;
  std::getline(in, line);
  std::vector<std::string> cols;
  {
    std::istringstream ls(line);
    for (std::string f; std::getline(ls, f, '\t');) cols.push_back(f);
  }
  auto col = [&](const std::string& n) {
    const auto it = std::find(cols.begin(), cols.end(), n);
    if (it == cols.end()) throw Error(path + ": sweep table lacks column '" + n + "'");
    return static_cast<std::size_t>(it - cols.begin());
  };
  const std::size_t xr = col("labeled_ratio");
  const std::pair<const char*, std::size_t> ys[] = {{"FH", col("dsc_fh")}, {"PS", col("dsc_ps")}, {"PSFH", col("dsc_psfh")}};
  std::map<double, std::pair<double, int>> acc[3];
  int lineno = 1, rows = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string t; std::getline(ls, t, '\t');) f.push_back(t);
    if (f.size() != cols.size())
      throw Error(path + ": malformed sweep table at line " + std::to_string(lineno));
    const double x = detail::parse_double(path + " line " + std::to_string(lineno), f[xr]);
    for (int k = 0; k < 3; ++k) {
      auto& a = acc[k][x];
      a.first += detail::parse_double(path + " line " + std::to_string(lineno), f[ys[k].second]);
      ++a.second;
    }
    ++rows;
  }
  if (rows == 0) throw Error(path + ": sweep table has no data rows");
  std::vector<Series> out;
  for (int k = 0; k < 3; ++k) out.push_back({ys[k].first, "labeled_ratio", "DSC", collapse(acc[k])});
  return out;
}

std::vector<Series> series_from_log(std::istream& in, const std::string& path) {
  RunLog log;
  try {
    log = parse_run_log(in);
  } catch (const Error& e) {
    throw Error(path + ": " + e.what());
  }
  if (log.rows.empty()) throw Error(path + ": log has no data rows");
  std::vector<Series> out;
  for (std::size_t c = 1; c < log.columns.size(); ++c) {
    std::map<double, std::pair<double, int>> acc;
    for (const auto& r : log.rows) {
      auto& a = acc[static_cast<double>(r.iteration)];
      a.first += r.values.at(log.columns[c]);
      ++a.second;
    }
    out.push_back({log.columns[c], "iteration", log.columns[c], collapse(acc)});
  }
  return out;
}

int cmd_plot_data(const Globals& g, const std::vector<std::string>& inputs) {
  std::vector<std::pair<std::string, std::vector<Series>>> all;
  for (const auto& path : inputs) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read '" + path + "'");
    std::string first;
    std::streampos start = in.tellg();
    while (std::getline(in, first) && (first.empty() || first.starts_with("#"))) {}
    in.clear();
    in.seekg(start);
    if (first.starts_with("setting\t")) {
      all.emplace_back(path, series_from_sweep(in, path));
    } else {
      all.emplace_back(path, series_from_log(in, path));
    }
  }
  if (g.out.empty()) {
    for (const auto& [path, s] : all) {
      std::cout << "# source " << path << '\n';
      emit(std::cout, s);
    }
    return 0;
  }
  fs::create_directories(g.out);
  for (const auto& [path, s] : all) {
    std::ostringstream os;
    emit(os, s);
    const fs::path target = fs::path(g.out) / (fs::path(path).stem().string() + ".series.txt");
    write_text(target, os.str());
    std::cout << "wrote " << target.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DSTCS semi-supervised segmentation on synthetic two-structure phantoms"};
  app.require_subcommand(1);
  app.fallthrough();
  app.footer(keys_footer());

  Globals g;
  app.add_option("--seed", g.seed, "Seed (training seed, or phantom seed for generate-data)");
  app.add_option("--config", g.config_path, "Config file of 'key = value' lines");
  app.add_option("--out", g.out, "Output directory");

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "Generate and save a phantom corpus");
  gen->footer(keys_footer());
  PhantomSpec spec;
  int count = 256;
  std::vector<std::string> spec_kv;
  double gen_ratio = 0.2;
  std::uint64_t gen_split_seed = 0;
  gen->add_option("--count", count, "Number of images")->capture_default_str();
  gen->add_option("--image-size", spec.image_size, "Pixels per side")->capture_default_str();
  gen->add_option("--phantom", spec_kv, "Phantom parameter override KEY=VALUE (repeatable)");
  gen->add_option("--labeled-ratio", gen_ratio, "Labeled fraction recorded in the manifest")->capture_default_str();
  gen->add_option("--split-seed", gen_split_seed, "Split seed recorded in the manifest")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train both students and the EMA teacher");
  std::string corpus_dir, resume, preset;
  std::map<std::string, std::string> train_over;
  train->add_option("--corpus", corpus_dir, "Corpus directory")->required();
  train->add_option("--resume", resume, "Checkpoint to resume from (its stored config is used)");
  train->add_option("--preset", preset, "Base settings: full (default) or desk");
  add_overrides(train, train_over);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint on a corpus split");
  std::string eval_corpus, checkpoint, which = "test";
  bool oracle = false;
  std::map<std::string, std::string> eval_over;
  eval->add_option("--corpus", eval_corpus, "Corpus directory")->required();
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file");
  eval->add_option("--split", which, "val | test | labeled | unlabeled | all")->capture_default_str();
  eval->add_flag("--oracle", oracle, "Score the ground truth itself (format and metric check)");
  add_overrides(eval, eval_over);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Grid over NW-Dice class weights x radius, or over annotation ratios");
  std::string sweep_corpus, sweep_preset_name, sweep_base;
  std::vector<std::string> weights;
  std::vector<int> radii;
  std::vector<double> ratios;
  std::map<std::string, std::string> sweep_over;
  sweep->add_option("--corpus", sweep_corpus, "Corpus directory")->required();
  sweep->add_option("--grid", sweep_preset_name, "Named grid: best | weights-radius");
  sweep->add_option("--weights", weights, "Class weight triples, e.g. 1,2,1 (repeatable)");
  sweep->add_option("--radii", radii, "NW-Dice radii");
  sweep->add_option("--ratios", ratios, "Annotation ratios in (0, 1]");
  sweep->add_option("--preset", sweep_base, "Base settings: full (default) or desk");
  add_overrides(sweep, sweep_over);

  // plot-data
  auto* plot = app.add_subcommand("plot-data", "Emit plain-text data series from run logs or sweep tables");
  plot->footer(keys_footer());
  std::vector<std::string> inputs;
  plot->add_option("inputs", inputs, "Run logs (train_log.tsv) or sweep tables (sweep.tsv)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(g, spec, count, spec_kv, gen_ratio, gen_split_seed);
    if (*train) return cmd_train(g, resolve_config(g, preset, train_over), corpus_dir, resume);
    if (*eval) return cmd_evaluate(g, checkpoint, eval_corpus, which, oracle, eval_over);
    if (*sweep)
      return cmd_sweep(g, resolve_config(g, sweep_base, sweep_over), sweep_corpus, sweep_preset_name, weights, radii,
                       ratios);
    if (*plot) return cmd_plot_data(g, inputs);
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
