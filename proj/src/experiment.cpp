#include "driftadapt/experiment.hpp"

#include "driftadapt/archive.hpp"
#include "driftadapt/dataset.hpp"
#include "driftadapt/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace driftadapt {

namespace fs = std::filesystem;

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("cannot parse " + what + " '" + s + "'");
  }
}

void write_json(const fs::path& path, const nlohmann::json& doc) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string on_off(bool v) { return v ? "on" : "off"; }

bool parse_on_off(const std::string& s) {
  if (s == "on" || s == "true" || s == "1") return true;
  if (s == "off" || s == "false" || s == "0") return false;
  throw ConfigError("expected on/off, got '" + s + "'");
}

struct Stats {
  double mean = 0.0;
  double stdev = 0.0;
};

Stats mean_stdev(const std::vector<double>& v) {
  Stats s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stdev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

fs::path ExperimentConfig::source_checkpoint_path() const {
  return source_checkpoint.empty() ? output_dir / "source.ckpt" : source_checkpoint;
}

DegradationSchedule ExperimentConfig::effective_schedule() const {
  if (schedule) return *schedule;
  return DegradationSchedule::make_default(degradation, degradation_seed);
}

void ExperimentConfig::validate() const {
  if (grad_norm_settings.empty()) throw ConfigError("at least one grad_norm setting is required");
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  std::set<std::uint64_t> unique(seeds.begin(), seeds.end());
  if (unique.size() != seeds.size()) throw ConfigError("seeds must be distinct");
  if (schedule && schedule->kind != degradation) throw ConfigError("schedule kind differs from degradation");
  if (schedule) schedule->validate();
  adaptation.validate();
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json doc;
  doc["clean_root"] = clean_root.string();
  doc["classes"] = classes;
  doc["sequence_root"] = sequence_root.string();
  doc["output_dir"] = output_dir.string();
  doc["source_checkpoint"] = source_checkpoint.string();
  doc["degradation"] = to_string(degradation);
  doc["degradation_seed"] = degradation_seed;
  if (schedule) doc["schedule"] = schedule->to_json();
  doc["source"] = source.to_json();
  auto adapt = adaptation.to_json();
  adapt.erase("grad_norm");
  adapt.erase("seed");
  doc["adaptation"] = adapt;
  auto gn = nlohmann::json::array();
  for (bool b : grad_norm_settings) gn.push_back(on_off(b));
  doc["grad_norm"] = gn;
  doc["seeds"] = seeds;
  return doc;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& doc) {
  static const std::set<std::string> known = {
      "clean_root", "classes", "sequence_root", "output_dir", "source_checkpoint", "degradation",
      "degradation_seed", "schedule", "source", "adaptation", "grad_norm", "seeds"};
  if (!doc.is_object()) throw ConfigError("experiment config must be an object");
  for (const auto& [key, value] : doc.items()) {
    if (!known.count(key)) throw ConfigError("unknown experiment config key '" + key + "'");
  }
  ExperimentConfig c;
  try {
    c.clean_root = doc.value("clean_root", std::string{});
    c.classes = doc.value("classes", std::vector<std::string>{});
    c.sequence_root = doc.value("sequence_root", std::string{});
    c.output_dir = doc.value("output_dir", c.output_dir.string());
    c.source_checkpoint = doc.value("source_checkpoint", std::string{});
    if (doc.contains("degradation")) c.degradation = parse_degradation_kind(doc["degradation"].get<std::string>());
    c.degradation_seed = doc.value("degradation_seed", c.degradation_seed);
    if (doc.contains("schedule")) c.schedule = DegradationSchedule::from_json(doc["schedule"]);
    if (doc.contains("source")) c.source = SourceTrainingConfig::from_json(doc["source"]);
    if (doc.contains("adaptation")) c.adaptation = AdaptationConfig::from_json(doc["adaptation"]);
    if (doc.contains("grad_norm")) {
      c.grad_norm_settings.clear();
      const auto& gn = doc["grad_norm"];
      if (gn.is_array()) {
        for (const auto& v : gn) c.grad_norm_settings.push_back(parse_on_off(v.get<std::string>()));
      } else {
        c.grad_norm_settings.push_back(parse_on_off(gn.get<std::string>()));
      }
    }
    if (doc.contains("seeds")) c.seeds = doc["seeds"].get<std::vector<std::uint64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) { return from_json(read_json(path)); }

// ---------------------------------------------------------------------------

std::string cmd_synthesize(const ExperimentConfig& config) {
  if (config.clean_root.empty()) throw ConfigError("clean_root is not set");
  if (config.sequence_root.empty()) throw ConfigError("sequence_root is not set");
  if (!fs::is_directory(config.clean_root)) {
    throw ValidationError("clean dataset directory not found: " + config.clean_root.string());
  }
  for (const auto& name : config.classes) {
    if (!fs::is_directory(config.clean_root / name)) {
      throw ValidationError("class directory missing: " + (config.clean_root / name).string());
    }
  }
  auto clean = load_class_folders(config.clean_root);
  if (!config.classes.empty()) {
    auto expected = config.classes;
    std::sort(expected.begin(), expected.end());
    if (clean.class_names != expected) {
      throw ValidationError("class directories under " + config.clean_root.string() +
                            " differ from the configured class list");
    }
  }
  const auto sequence = build_domain_sequence(clean, config.effective_schedule());
  write_domain_sequence(config.sequence_root, sequence);
  return json_hash(sequence.manifest);
}

SourceTrainingLog cmd_train_source(const ExperimentConfig& config) {
  if (config.sequence_root.empty()) throw ConfigError("sequence_root is not set");
  const auto sequence = load_domain_sequence(config.sequence_root);
  SourceTrainingLog log;
  auto model = train_source(sequence.source, config.source, &log);
  const auto path = config.source_checkpoint_path();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_model(path, model);
  nlohmann::json report = {{"config", config.source.to_json()},
                           {"provenance", model.provenance()},
                           {"classes", model.class_names()},
                           {"train_accuracy", log.train_accuracy},
                           {"epoch_loss", log.epoch_loss}};
  write_json(fs::path(path).replace_extension(".json"), report);
  return log;
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& results_columns() {
  static const std::vector<std::string> columns = {
      "run_id", "method", "backbone", "eta0", "grad_norm", "seed",
      "source_accuracy", "final_accuracy", "max_chunk_drop", "chunk_accuracies"};
  return columns;
}

void write_results_csv(const fs::path& path, const std::vector<RunResult>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  const auto& cols = results_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : rows) {
    out << r.run_id << ',' << r.method << ',' << r.backbone << ',' << format_double(r.eta0) << ','
        << on_off(r.grad_norm) << ',' << r.seed << ',' << format_double(r.source_accuracy) << ','
        << format_double(r.final_accuracy) << ',' << format_double(r.max_chunk_drop) << ',';
    for (std::size_t i = 0; i < r.chunk_accuracies.size(); ++i) {
      out << (i ? ";" : "") << format_double(r.chunk_accuracies[i]);
    }
    out << '\n';
  }
}

std::vector<RunResult> read_results_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty results file: " + path.string());
  if (split(line, ',') != results_columns()) {
    throw ValidationError("incompatible results schema in " + path.string());
  }
  std::vector<RunResult> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != results_columns().size()) {
      throw ValidationError("malformed results row in " + path.string() + ": " + line);
    }
    RunResult r;
    r.run_id = f[0];
    r.method = f[1];
    r.backbone = f[2];
    r.eta0 = parse_double(f[3], "eta0");
    try {
      r.grad_norm = parse_on_off(f[4]);
    } catch (const ConfigError&) {
      throw ValidationError("bad grad_norm value '" + f[4] + "' in " + path.string());
    }
    r.seed = static_cast<std::uint64_t>(parse_double(f[5], "seed"));
    r.source_accuracy = parse_double(f[6], "source_accuracy");
    r.final_accuracy = parse_double(f[7], "final_accuracy");
    r.max_chunk_drop = parse_double(f[8], "max_chunk_drop");
    if (!f[9].empty()) {
      for (const auto& v : split(f[9], ';')) r.chunk_accuracies.push_back(parse_double(v, "chunk accuracy"));
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

double max_chunk_drop(const std::vector<double>& accuracies, std::optional<double> before) {
  std::vector<double> seq;
  if (before) seq.push_back(*before);
  seq.insert(seq.end(), accuracies.begin(), accuracies.end());
  double worst = 0.0;
  for (std::size_t i = 1; i < seq.size(); ++i) worst = std::max(worst, seq[i - 1] - seq[i]);
  return worst;
}

// ---------------------------------------------------------------------------

namespace {

std::string run_id(const AdaptationConfig& c) {
  return to_string(c.method) + "_gn-" + on_off(c.grad_norm) + "_seed-" + std::to_string(c.seed);
}

RunResult to_result(const std::string& id, const std::string& backbone, const AdaptationConfig& c,
                    const AdaptationTrace& trace) {
  RunResult r;
  r.run_id = id;
  r.method = to_string(c.method);
  r.backbone = backbone;
  r.eta0 = c.eta0;
  r.grad_norm = c.grad_norm;
  r.seed = c.seed;
  r.source_accuracy = trace.source_accuracy;
  r.final_accuracy = trace.final_accuracy;
  r.chunk_accuracies = trace.chunk_accuracies();
  r.max_chunk_drop = max_chunk_drop(r.chunk_accuracies);
  return r;
}

}  // namespace

std::vector<RunResult> cmd_adapt(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  if (config.sequence_root.empty()) throw ConfigError("sequence_root is not set");
  const auto sequence = load_domain_sequence(config.sequence_root);
  const auto checkpoint = config.source_checkpoint_path();
  auto model = load_model(checkpoint, static_cast<int>(sequence.class_names().size()));
  if (model.class_names() != sequence.class_names()) {
    throw ConfigError("source checkpoint " + checkpoint.string() + " was trained on different classes");
  }

  fs::create_directories(config.output_dir / "runs");
  fs::create_directories(config.output_dir / "plots");
  write_json(config.output_dir / "config.json", config.to_json());

  std::vector<RunResult> rows;
  std::map<std::uint64_t, std::vector<std::pair<std::string, std::vector<double>>>> plots;
  for (auto seed : config.seeds) {
    for (bool gn : config.grad_norm_settings) {
      AdaptationConfig ac = config.adaptation;
      ac.grad_norm = gn;
      ac.seed = seed;
      const auto id = run_id(ac);
      const auto dir = config.output_dir / "runs" / id;
      fs::create_directories(dir);
      const auto engine_ckpt = dir / "engine.ckpt";

      auto engine = options.resume && fs::exists(engine_ckpt) ? ContinualEngine::resume(engine_ckpt, sequence)
                                                              : ContinualEngine(model, sequence, ac);
      if (json_hash(engine.config().to_json()) != json_hash(ac.to_json())) {
        throw ConfigError("engine checkpoint " + engine_ckpt.string() + " was written with a different config");
      }
      while (!engine.finished()) {
        const auto& record = engine.step();
        engine.save_checkpoint(engine_ckpt);
        if (!options.quiet) {
          std::cerr << id << " chunk " << record.chunk_index + 1 << "/" << engine.chunk_count() << " ("
                    << record.domain_name << ") accuracy " << record.accuracy << '\n';
        }
      }
      const auto& trace = engine.trace();
      write_trace_jsonl(dir / "trace.jsonl", trace);
      write_json(dir / "summary.json", trace.summary_json());
      rows.push_back(to_result(id, model.backbone_key(), ac, trace));
      plots[seed].emplace_back("grad-norm " + on_off(gn), trace.chunk_accuracies());
    }
  }

  write_results_csv(config.output_dir / "results.csv", rows);

  nlohmann::json summary = {{"method", to_string(config.adaptation.method)},
                            {"backbone", model.backbone_key()},
                            {"eta0", config.adaptation.eta0},
                            {"settings", nlohmann::json::array()}};
  for (bool gn : config.grad_norm_settings) {
    std::vector<double> finals;
    std::vector<double> drops;
    for (const auto& r : rows) {
      if (r.grad_norm != gn) continue;
      finals.push_back(r.final_accuracy);
      drops.push_back(r.max_chunk_drop);
    }
    const auto s = mean_stdev(finals);
    const auto d = mean_stdev(drops);
    summary["settings"].push_back({{"grad_norm", on_off(gn)},
                                   {"runs", finals.size()},
                                   {"final_accuracy_mean", s.mean},
                                   {"final_accuracy_std", s.stdev},
                                   {"max_chunk_drop_mean", d.mean},
                                   {"final_accuracies", finals}});
  }
  write_json(config.output_dir / "summary.json", summary);

  for (const auto& [seed, series] : plots) {
    write_accuracy_svg(config.output_dir / "plots" / ("seed_" + std::to_string(seed) + ".svg"),
                       to_string(config.adaptation.method) + ", eta0 " + format_double(config.adaptation.eta0) +
                           ", seed " + std::to_string(seed),
                       series);
  }
  return rows;
}

// ---------------------------------------------------------------------------

std::vector<ReportRow> aggregate_results(const std::vector<RunResult>& rows) {
  using Key = std::tuple<std::string, std::string, double, bool>;
  std::map<Key, std::vector<double>> groups;
  std::vector<Key> order;
  for (const auto& r : rows) {
    Key k{r.method, r.backbone, r.eta0, r.grad_norm};
    if (!groups.count(k)) order.push_back(k);
    groups[k].push_back(r.final_accuracy);
  }
  std::vector<ReportRow> out;
  for (const auto& k : order) {
    const auto s = mean_stdev(groups[k]);
    ReportRow row;
    std::tie(row.method, row.backbone, row.eta0, row.grad_norm) = k;
    row.runs = groups[k].size();
    row.mean = s.mean;
    row.stdev = s.stdev;
    out.push_back(row);
  }
  for (bool gn : {false, true}) {
    std::vector<ReportRow*> column;
    for (auto& r : out) {
      if (r.grad_norm == gn) column.push_back(&r);
    }
    std::stable_sort(column.begin(), column.end(), [](const ReportRow* a, const ReportRow* b) { return a->mean > b->mean; });
    for (std::size_t i = 0; i < column.size() && i < 2; ++i) column[i]->rank = static_cast<int>(i) + 1;
  }
  return out;
}

std::string format_report(const std::vector<ReportRow>& rows) {
  using RowKey = std::tuple<std::string, std::string, double>;
  std::vector<RowKey> keys;
  std::map<std::pair<RowKey, bool>, const ReportRow*> cells;
  for (const auto& r : rows) {
    RowKey k{r.method, r.backbone, r.eta0};
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    cells[{k, r.grad_norm}] = &r;
  }
  auto cell = [&](const RowKey& k, bool gn) -> std::string {
    const auto it = cells.find({k, gn});
    if (it == cells.end()) return "-";
    const auto& r = *it->second;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f +/- %.2f (n=%zu)", 100.0 * r.mean, 100.0 * r.stdev, r.runs);
    std::string s = buf;
    if (r.rank == 1) s = "**" + s + "**";
    if (r.rank == 2) s = "_" + s + "_";
    return s;
  };
  std::vector<std::array<std::string, 5>> table;
  table.push_back({"method", "backbone", "eta0", "grad-norm off", "grad-norm on"});
  for (const auto& k : keys) {
    table.push_back({std::get<0>(k), std::get<1>(k), format_double(std::get<2>(k)), cell(k, false), cell(k, true)});
  }
  std::array<std::size_t, 5> width{};
  for (const auto& row : table)
    for (std::size_t c = 0; c < 5; ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream out;
  for (std::size_t r = 0; r < table.size(); ++r) {
    for (std::size_t c = 0; c < 5; ++c) {
      out << (c ? "  " : "") << table[r][c] << std::string(width[c] - table[r][c].size(), ' ');
    }
    out << '\n';
    if (r == 0) {
      for (std::size_t c = 0; c < 5; ++c) out << (c ? "  " : "") << std::string(width[c], '-');
      out << '\n';
    }
  }
  out << "accuracy in percent; ** best, _ second best per column\n";
  return out.str();
}

void write_report_csv(const fs::path& path, const std::vector<ReportRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "method,backbone,eta0,grad_norm,runs,mean_accuracy,std_accuracy,rank\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.backbone << ',' << format_double(r.eta0) << ',' << on_off(r.grad_norm) << ','
        << r.runs << ',' << format_double(r.mean) << ',' << format_double(r.stdev) << ',' << r.rank << '\n';
  }
}

std::vector<ReportRow> cmd_report(const std::vector<fs::path>& results, const fs::path& csv_out) {
  if (results.empty()) throw InputError("report needs at least one results file");
  std::vector<RunResult> rows;
  for (const auto& p : results) {
    auto part = read_results_csv(p);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  auto report = aggregate_results(rows);
  if (!csv_out.empty()) write_report_csv(csv_out, report);
  return report;
}

// ---------------------------------------------------------------------------

void write_accuracy_svg(const fs::path& path, const std::string& title,
                        const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  constexpr double W = 640, H = 400, left = 60, right = 150, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  std::size_t n = 0;
  for (const auto& s : series) n = std::max(n, s.second.size());
  const double xspan = n > 1 ? static_cast<double>(n - 1) : 1.0;
  auto px = [&](std::size_t i) { return left + pw * static_cast<double>(i) / xspan; };
  auto py = [&](double acc) { return top + ph * (1.0 - std::clamp(acc, 0.0, 1.0)); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << left << "\" y=\"24\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
  for (int t = 0; t <= 10; t += 2) {
    const double y = py(t / 10.0);
    out << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << left + pw << "\" y2=\"" << y
        << "\" stroke=\"#ddd\"/>\n";
    out << "<text x=\"" << left - 8 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << t * 10 << "</text>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    out << "<text x=\"" << px(i) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << i + 1
        << "</text>\n";
  }
  out << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  out << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">incoming batch</text>\n";
  out << "<text x=\"16\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 16 " << top + ph / 2
      << ")\" text-anchor=\"middle\">target accuracy (%)</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = colors[s % 6];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < series[s].second.size(); ++i) {
      out << (i ? " " : "") << px(i) << ',' << py(series[s].second[i]);
    }
    out << "\"/>\n";
    for (std::size_t i = 0; i < series[s].second.size(); ++i) {
      out << "<circle cx=\"" << px(i) << "\" cy=\"" << py(series[s].second[i]) << "\" r=\"3\" fill=\"" << color
          << "\"/>\n";
    }
    const double ly = top + 16 + 20.0 * static_cast<double>(s);
    out << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 36 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    out << "<text x=\"" << left + pw + 42 << "\" y=\"" << ly + 4 << "\">" << xml_escape(series[s].first)
        << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace driftadapt
