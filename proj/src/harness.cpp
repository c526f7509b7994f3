#include "calmargin/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "calmargin/random.hpp"
#include "calmargin/tensor_io.hpp"

namespace calmargin {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- formatting

std::string format_double(double value) {
  if (std::isnan(value)) return "NA";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  const auto result = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, result.ptr);
}

namespace {

std::string format_optional(const std::optional<double>& value) {
  return value ? format_double(*value) : "NA";
}

std::string join(const std::vector<std::string>& cells) {
  std::string line;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i > 0) line += ',';
    line += cells[i];
  }
  return line + '\n';
}

double parse_number(const std::string& cell) {
  if (cell == "NA" || cell.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (cell == "inf") return std::numeric_limits<double>::infinity();
  if (cell == "-inf") return -std::numeric_limits<double>::infinity();
  double value = 0.0;
  const auto result = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  require(result.ec == std::errc() && result.ptr == cell.data() + cell.size(),
          ErrorCode::kValidation, "not a number: '" + cell + "'");
  return value;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  require(out.good(), ErrorCode::kIo, "write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot read " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  write_text(tmp, text);
  fs::rename(tmp, path);
}

}  // namespace

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  require(it != header.end(), ErrorCode::kValidation, "missing CSV column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

CsvTable parse_csv(const std::string& text) {
  CsvTable table;
  std::istringstream in(text);
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream fields(line);
    while (std::getline(fields, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (first) {
      table.header = std::move(cells);
      first = false;
    } else {
      require(cells.size() == table.header.size(), ErrorCode::kValidation,
              "CSV row has " + std::to_string(cells.size()) + " cells, header has " +
                  std::to_string(table.header.size()));
      table.rows.push_back(std::move(cells));
    }
  }
  require(!table.header.empty(), ErrorCode::kValidation, "empty CSV");
  return table;
}

std::string reports_csv(const std::vector<MetricReport>& reports, std::size_t num_classes) {
  std::vector<std::string> header{"method", "case", "dsc_mean", "asd_mean", "ece", "cece", "nll"};
  for (std::size_t c = 0; c < num_classes; ++c) header.push_back("dsc_" + std::to_string(c));
  for (std::size_t c = 0; c < num_classes; ++c) header.push_back("asd_" + std::to_string(c));
  std::string text = join(header);
  for (const auto& r : reports) {
    std::vector<std::string> row{r.method,           r.case_id,          format_double(r.dsc_mean),
                                 format_optional(r.asd_mean), format_double(r.ece),
                                 format_double(r.cece), format_double(r.nll)};
    for (double v : r.dsc_per_class) row.push_back(format_double(v));
    for (const auto& v : r.asd_per_class) row.push_back(format_optional(v));
    text += join(row);
  }
  return text;
}

std::string reliability_csv(const ReliabilityTable& table) {
  std::string text = "bin_lo,bin_hi,count,accuracy,confidence\n";
  for (const auto& bin : table.bins) {
    text += join({format_double(bin.lower), format_double(bin.upper), std::to_string(bin.count),
                  format_double(bin.accuracy), format_double(bin.confidence)});
  }
  return text;
}

// ---------------------------------------------------------------- config

namespace {

void check_keys(const json& object, std::initializer_list<const char*> allowed,
                const std::string& section) {
  require(object.is_object(), ErrorCode::kConfig, section + " must be a JSON object");
  for (const auto& [key, value] : object.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* name) { return key == name; });
    require(known, ErrorCode::kConfig, "unknown key '" + key + "' in " + section);
  }
}

template <typename T>
T value_or(const json& object, const char* key, T fallback, const std::string& section) {
  if (!object.contains(key)) return fallback;
  try {
    return object.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, section + "." + key + ": " + e.what());
  }
}

std::size_t size_or(const json& object, const char* key, std::size_t fallback,
                    const std::string& section) {
  if (!object.contains(key)) return fallback;
  const json& v = object.at(key);
  require(v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0),
          ErrorCode::kConfig, section + "." + key + " must be a non-negative integer");
  return v.get<std::size_t>();
}

bool valid_name(const std::string& name) {
  if (name.empty()) return false;
  return std::all_of(name.begin(), name.end(), [](char ch) {
    return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '+' ||
           ch == '.';
  });
}

Orientation parse_orientation(const std::string& name) {
  if (name == "higher") return Orientation::kHigherBetter;
  if (name == "lower") return Orientation::kLowerBetter;
  fail(ErrorCode::kConfig, "orientation must be 'higher' or 'lower', got '" + name + "'");
}

json loss_to_json(const NamedLoss& loss) {
  const auto& c = loss.config;
  return json{{"name", loss.name},
              {"kind", std::string(to_string(c.kind))},
              {"alpha", c.alpha},
              {"gamma", c.gamma},
              {"lambda", c.lambda},
              {"margin", c.margin},
              {"svls_kernel_size", c.svls_kernel_size},
              {"svls_sigma", c.svls_sigma},
              {"dice_weight", c.dice_weight},
              {"epsilon", c.epsilon}};
}

LossConfig loss_from_json(const json& j, std::string& name) {
  const std::string section = "losses[]";
  check_keys(j, {"name", "kind", "alpha", "gamma", "lambda", "margin", "svls_kernel_size",
                 "svls_sigma", "dice_weight", "epsilon"},
             section);
  LossConfig c;
  require(j.contains("kind"), ErrorCode::kConfig, "every loss needs a 'kind'");
  c.kind = parse_loss_kind(value_or<std::string>(j, "kind", "", section));
  name = value_or<std::string>(j, "name", std::string(to_string(c.kind)), section);
  c.alpha = value_or(j, "alpha", c.alpha, section);
  c.gamma = value_or(j, "gamma", c.gamma, section);
  c.lambda = value_or(j, "lambda", c.lambda, section);
  c.margin = value_or(j, "margin", c.margin, section);
  c.svls_kernel_size = value_or(j, "svls_kernel_size", c.svls_kernel_size, section);
  c.svls_sigma = value_or(j, "svls_sigma", c.svls_sigma, section);
  c.dice_weight = value_or(j, "dice_weight", c.dice_weight, section);
  c.epsilon = value_or(j, "epsilon", c.epsilon, section);
  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kConfig, "loss '" + name + "': " + e.what());
  }
  return c;
}

json config_to_json(const ExperimentConfig& cfg) {
  const auto& t = cfg.task;
  json task{{"height", t.height},
            {"width", t.width},
            {"num_classes", t.num_classes},
            {"intensities", t.class_intensities()},
            {"noise_sigma", t.noise_sigma},
            {"min_extent", t.min_extent},
            {"max_extent", t.max_extent},
            {"shapes_per_class", t.shapes_per_class},
            {"train_count", t.train_count},
            {"val_count", t.val_count},
            {"test_count", t.test_count}};
  json stages = json::array();
  for (const auto& s : cfg.schedule.stages) {
    stages.push_back({{"start_epoch", s.start_epoch}, {"lr", s.lr}});
  }
  json schedule{{"epochs", cfg.schedule.epochs},
                {"batch_size", cfg.schedule.batch_size},
                {"beta1", cfg.schedule.adam.beta1},
                {"beta2", cfg.schedule.adam.beta2},
                {"epsilon", cfg.schedule.adam.epsilon},
                {"stages", stages}};
  json losses = json::array();
  for (const auto& l : cfg.losses) losses.push_back(loss_to_json(l));
  json rank_metrics = json::array();
  for (const auto& m : cfg.rank_metrics) {
    rank_metrics.push_back(
        {{"name", m.name},
         {"orientation", m.orientation == Orientation::kHigherBetter ? "higher" : "lower"}});
  }
  json rank_inputs = json::array();
  for (const auto& p : cfg.rank_inputs) rank_inputs.push_back(p.generic_string());
  return json{{"seed", cfg.seed},
              {"task", task},
              {"model", {{"patch_radius", cfg.patch_radius}, {"hidden", cfg.hidden}}},
              {"schedule", schedule},
              {"losses", losses},
              {"metrics",
               {{"bins", cfg.metrics.num_bins},
                {"background", cfg.background_class},
                {"mask", to_string(cfg.metrics.mask)}}},
              {"temperature_scaling",
               {{"enabled", cfg.temperature_scaling},
                {"mask", to_string(cfg.ts_search.mask)},
                {"lower", cfg.ts_search.lower},
                {"upper", cfg.ts_search.upper},
                {"tolerance", cfg.ts_search.tolerance}}},
              {"noise_grid", cfg.noise_grid},
              {"rank", {{"inputs", rank_inputs}, {"metrics", rank_metrics}}}};
}

}  // namespace

std::string ExperimentConfig::canonical_json() const { return config_to_json(*this).dump(); }

std::string ExperimentConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical_json()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ExperimentConfig parse_config(const std::string& json_text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(root, {"seed", "task", "model", "schedule", "losses", "metrics",
                    "temperature_scaling", "noise_grid", "rank", "output_dir"},
             "config");
  ExperimentConfig cfg;
  cfg.seed = value_or<std::uint64_t>(root, "seed", 0, "config");

  if (root.contains("task")) {
    const json& t = root["task"];
    const std::string s = "task";
    check_keys(t, {"height", "width", "num_classes", "intensities", "noise_sigma", "min_extent",
                   "max_extent", "shapes_per_class", "train_count", "val_count", "test_count"},
               s);
    auto& task = cfg.task;
    task.height = size_or(t, "height", task.height, s);
    task.width = size_or(t, "width", task.width, s);
    task.num_classes = size_or(t, "num_classes", task.num_classes, s);
    task.intensities = value_or(t, "intensities", task.intensities, s);
    task.noise_sigma = value_or(t, "noise_sigma", task.noise_sigma, s);
    task.min_extent = value_or(t, "min_extent", task.min_extent, s);
    task.max_extent = value_or(t, "max_extent", task.max_extent, s);
    task.shapes_per_class = size_or(t, "shapes_per_class", task.shapes_per_class, s);
    task.train_count = size_or(t, "train_count", task.train_count, s);
    task.val_count = size_or(t, "val_count", task.val_count, s);
    task.test_count = size_or(t, "test_count", task.test_count, s);
  }
  cfg.task.seed = cfg.seed;
  cfg.task.validate();

  if (root.contains("model")) {
    const json& m = root["model"];
    check_keys(m, {"patch_radius", "hidden"}, "model");
    cfg.patch_radius = size_or(m, "patch_radius", cfg.patch_radius, "model");
    cfg.hidden = size_or(m, "hidden", cfg.hidden, "model");
    require(cfg.hidden >= 1, ErrorCode::kConfig, "model.hidden must be >= 1");
  }

  if (root.contains("schedule")) {
    const json& s = root["schedule"];
    const std::string sec = "schedule";
    check_keys(s, {"epochs", "batch_size", "beta1", "beta2", "epsilon", "stages"}, sec);
    auto& sched = cfg.schedule;
    sched.epochs = size_or(s, "epochs", sched.epochs, sec);
    sched.batch_size = size_or(s, "batch_size", sched.batch_size, sec);
    sched.adam.beta1 = value_or(s, "beta1", sched.adam.beta1, sec);
    sched.adam.beta2 = value_or(s, "beta2", sched.adam.beta2, sec);
    sched.adam.epsilon = value_or(s, "epsilon", sched.adam.epsilon, sec);
    if (s.contains("stages")) {
      require(s["stages"].is_array(), ErrorCode::kConfig, "schedule.stages must be an array");
      sched.stages.clear();
      for (const json& st : s["stages"]) {
        check_keys(st, {"start_epoch", "lr"}, "schedule.stages[]");
        sched.stages.push_back({size_or(st, "start_epoch", 0, "schedule.stages[]"),
                                value_or(st, "lr", 1e-3, "schedule.stages[]")});
      }
    }
  }
  cfg.schedule.validate();

  require(root.contains("losses") && root["losses"].is_array() && !root["losses"].empty(),
          ErrorCode::kConfig, "config needs a non-empty 'losses' array");
  std::set<std::string> names;
  for (const json& l : root["losses"]) {
    NamedLoss named;
    named.config = loss_from_json(l, named.name);
    require(valid_name(named.name), ErrorCode::kConfig,
            "loss name '" + named.name + "' must match [A-Za-z0-9_+.-]+");
    require(names.insert(named.name).second, ErrorCode::kConfig,
            "duplicate loss name '" + named.name + "'");
    cfg.losses.push_back(std::move(named));
  }

  if (root.contains("metrics")) {
    const json& m = root["metrics"];
    check_keys(m, {"bins", "background", "mask"}, "metrics");
    cfg.metrics.num_bins = size_or(m, "bins", cfg.metrics.num_bins, "metrics");
    cfg.background_class = size_or(m, "background", cfg.background_class, "metrics");
    cfg.metrics.mask = parse_mask_rule(value_or<std::string>(m, "mask", "union", "metrics"));
  }
  require(cfg.metrics.num_bins >= 1, ErrorCode::kConfig, "metrics.bins must be >= 1");
  require(cfg.background_class < cfg.task.num_classes, ErrorCode::kConfig,
          "metrics.background must be a valid class");

  if (root.contains("temperature_scaling")) {
    const json& t = root["temperature_scaling"];
    const std::string sec = "temperature_scaling";
    check_keys(t, {"enabled", "mask", "lower", "upper", "tolerance"}, sec);
    cfg.temperature_scaling = value_or(t, "enabled", true, sec);
    cfg.ts_search.mask = parse_mask_rule(value_or<std::string>(t, "mask", "union", sec));
    cfg.ts_search.lower = value_or(t, "lower", cfg.ts_search.lower, sec);
    cfg.ts_search.upper = value_or(t, "upper", cfg.ts_search.upper, sec);
    cfg.ts_search.tolerance = value_or(t, "tolerance", cfg.ts_search.tolerance, sec);
  }
  require(cfg.ts_search.lower > 0.0 && cfg.ts_search.upper > cfg.ts_search.lower &&
              cfg.ts_search.tolerance > 0.0,
          ErrorCode::kConfig, "invalid temperature search bracket");

  if (root.contains("noise_grid")) {
    cfg.noise_grid = value_or(root, "noise_grid", cfg.noise_grid, "config");
    for (double s : cfg.noise_grid) {
      require(s >= 0.0 && std::isfinite(s), ErrorCode::kConfig, "noise_grid entries must be >= 0");
    }
  }

  if (root.contains("rank")) {
    const json& r = root["rank"];
    check_keys(r, {"inputs", "metrics"}, "rank");
    for (const auto& p : value_or<std::vector<std::string>>(r, "inputs", {}, "rank")) {
      fs::path path(p);
      cfg.rank_inputs.push_back(path.is_absolute() ? path : base_dir / path);
    }
    if (r.contains("metrics")) {
      require(r["metrics"].is_array() && !r["metrics"].empty(), ErrorCode::kConfig,
              "rank.metrics must be a non-empty array");
      cfg.rank_metrics.clear();
      for (const json& m : r["metrics"]) {
        check_keys(m, {"name", "orientation"}, "rank.metrics[]");
        cfg.rank_metrics.push_back(
            {value_or<std::string>(m, "name", "", "rank.metrics[]"),
             parse_orientation(value_or<std::string>(m, "orientation", "lower", "rank.metrics[]"))});
        require(!cfg.rank_metrics.back().name.empty(), ErrorCode::kConfig,
                "rank metric needs a name");
      }
    }
  }

  if (root.contains("output_dir")) {
    fs::path out(value_or<std::string>(root, "output_dir", "", "config"));
    cfg.output_dir = out.is_absolute() ? out : base_dir / out;
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorCode::kConfig, "config file not found: " + path.string());
  return parse_config(read_text(path), path.parent_path());
}

std::string to_string(Command command) {
  switch (command) {
    case Command::kTrain: return "train";
    case Command::kEval: return "eval";
    case Command::kCalibrate: return "calibrate";
    case Command::kPerturb: return "perturb";
    case Command::kRank: return "rank";
    case Command::kReliability: return "reliability";
  }
  return "?";
}

Command parse_command(const std::string& name) {
  for (auto c : {Command::kTrain, Command::kEval, Command::kCalibrate, Command::kPerturb,
                 Command::kRank, Command::kReliability}) {
    if (to_string(c) == name) return c;
  }
  fail(ErrorCode::kConfig, "unknown command '" + name + "'");
}

std::size_t threads_from_env() {
  const char* value = std::getenv("CALMARGIN_THREADS");
  if (value == nullptr) return 1;
  std::size_t n = 0;
  const std::string_view text(value);
  const auto result = std::from_chars(text.data(), text.data() + text.size(), n);
  if (result.ec != std::errc() || n == 0) return 1;
  return n;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig:
    case ErrorCode::kAlreadyCompleted:
      return 1;
    case ErrorCode::kNumerical:
      return 3;
    default:
      return 2;
  }
}

// ---------------------------------------------------------------- evaluation

std::vector<MetricReport> evaluate_cases(const std::string& method,
                                         const std::vector<LogitField>& logits,
                                         const std::vector<LabelField>& labels,
                                         const EvaluationSettings& settings, double temperature) {
  require(logits.size() == labels.size(), ErrorCode::kShapeMismatch,
          "one label field per case is required");
  std::vector<MetricReport> out;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "case_%03zu", i);
    out.push_back(evaluate_case(method, id, logits[i], labels[i], settings, temperature));
  }
  return out;
}

RankOutputs rank_reports(const std::vector<CsvTable>& tables,
                         const std::vector<MetricSpec>& metrics) {
  require(!tables.empty(), ErrorCode::kValidation, "no ranking inputs");
  // method -> case -> metric -> value
  std::vector<std::string> methods;
  std::vector<std::string> cases;
  std::map<std::string, std::map<std::string, MethodScores>> values;
  for (std::size_t t = 0; t < tables.size(); ++t) {
    const auto& table = tables[t];
    const std::size_t method_col = table.column("method");
    const std::size_t case_col = table.column("case");
    std::vector<std::size_t> metric_cols;
    for (const auto& m : metrics) metric_cols.push_back(table.column(m.name));
    for (const auto& row : table.rows) {
      const std::string& method = row[method_col];
      const std::string case_id =
          tables.size() > 1 ? std::to_string(t) + ":" + row[case_col] : row[case_col];
      if (std::find(methods.begin(), methods.end(), method) == methods.end()) {
        methods.push_back(method);
      }
      if (std::find(cases.begin(), cases.end(), case_id) == cases.end()) cases.push_back(case_id);
      auto& scores = values[method][case_id];
      for (std::size_t m = 0; m < metrics.size(); ++m) {
        scores[metrics[m].name] = parse_number(row[metric_cols[m]]);
      }
    }
  }

  auto worst = [](const MetricSpec& m) {
    return m.orientation == Orientation::kHigherBetter ? -std::numeric_limits<double>::infinity()
                                                       : std::numeric_limits<double>::infinity();
  };

  // Mean score per method; undefined entries are skipped, all-undefined ranks last.
  std::vector<MethodScores> means;
  std::vector<std::vector<MethodScores>> per_case;
  for (const auto& method : methods) {
    const auto& by_case = values[method];
    MethodScores mean;
    for (const auto& m : metrics) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& case_id : cases) {
        const auto it = by_case.find(case_id);
        if (it == by_case.end()) continue;
        const double v = it->second.at(m.name);
        if (std::isnan(v)) continue;
        sum += v;
        ++n;
      }
      mean[m.name] = n > 0 ? sum / static_cast<double>(n) : worst(m);
    }
    means.push_back(std::move(mean));

    std::vector<MethodScores> rows;
    for (const auto& case_id : cases) {
      const auto it = by_case.find(case_id);
      require(it != by_case.end(), ErrorCode::kValidation,
              "method '" + method + "' has no result for case '" + case_id + "'");
      MethodScores row = it->second;
      for (const auto& m : metrics) {
        if (std::isnan(row[m.name])) row[m.name] = worst(m);
      }
      rows.push_back(std::move(row));
    }
    per_case.push_back(std::move(rows));
  }
  return {sum_rank(methods, means, metrics), mean_case_rank(methods, per_case, metrics)};
}

// ---------------------------------------------------------------- run directory

namespace {

struct RunContext {
  const ExperimentConfig& config;
  fs::path out;
  fs::path command_dir;
  std::size_t threads;
};

fs::path data_dir(const fs::path& out) { return out / "data"; }
fs::path model_dir(const fs::path& out, const std::string& method) {
  return out / "train" / method;
}

void save_split(const Split& split, const fs::path& dir, const std::string& name) {
  const auto& first = split.labels.front();
  const auto n = static_cast<std::uint32_t>(split.images.size());
  const auto h = static_cast<std::uint32_t>(first.height());
  const auto w = static_cast<std::uint32_t>(first.width());
  Float64Tensor images{{n, h, w}, {}};
  Int32Tensor labels{{n, h, w}, {}};
  for (std::size_t i = 0; i < split.images.size(); ++i) {
    images.data.insert(images.data.end(), split.images[i].pixels.begin(),
                       split.images[i].pixels.end());
    labels.data.insert(labels.data.end(), split.labels[i].values().begin(),
                       split.labels[i].values().end());
  }
  save_tensor(images, dir / (name + "_images.calt"));
  save_tensor(labels, dir / (name + "_labels.calt"));
}

Split load_split(const fs::path& dir, const std::string& name, std::size_t num_classes,
                 std::size_t background) {
  const fs::path image_path = dir / (name + "_images.calt");
  const fs::path label_path = dir / (name + "_labels.calt");
  require(fs::exists(image_path) && fs::exists(label_path), ErrorCode::kValidation,
          "missing " + name + " split under " + dir.string() + " (run train first)");
  const Tensor images = load_tensor(image_path);
  const Tensor labels = load_tensor(label_path);
  const auto* fi = std::get_if<Float64Tensor>(&images);
  const auto* li = std::get_if<Int32Tensor>(&labels);
  require(fi != nullptr && li != nullptr, ErrorCode::kDtypeMismatch,
          "split tensors have unexpected dtypes");
  require(fi->dims.size() == 3 && fi->dims == li->dims, ErrorCode::kShapeMismatch,
          "split image and label tensors disagree");
  const std::size_t n = fi->dims[0], h = fi->dims[1], w = fi->dims[2];
  Split split;
  for (std::size_t i = 0; i < n; ++i) {
    const auto begin = static_cast<std::ptrdiff_t>(i * h * w);
    const auto end = static_cast<std::ptrdiff_t>((i + 1) * h * w);
    split.images.push_back(
        Image{h, w, std::vector<double>(fi->data.begin() + begin, fi->data.begin() + end)});
    split.labels.emplace_back(
        h, w, num_classes,
        std::vector<std::int32_t>(li->data.begin() + begin, li->data.begin() + end), background);
  }
  return split;
}

void save_model(const PixelModel& model, const NamedLoss& loss, std::size_t best_epoch,
                const fs::path& dir) {
  const auto params = model.parameters();
  save_tensor(Float64Tensor{{static_cast<std::uint32_t>(params.size())},
                            std::vector<double>(params.begin(), params.end())},
              dir / "model.calt");
  json manifest{{"patch_radius", model.patch_radius()},
                {"hidden", model.hidden()},
                {"num_classes", model.num_classes()},
                {"parameter_count", params.size()},
                {"best_epoch", best_epoch},
                {"loss", loss_to_json(loss)}};
  write_text(dir / "model.json", manifest.dump(2) + "\n");
}

PixelModel load_model(const fs::path& dir) {
  require(fs::exists(dir / "model.json") && fs::exists(dir / "model.calt"),
          ErrorCode::kValidation, "missing model under " + dir.string() + " (run train first)");
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "model.json"));
  } catch (const json::exception& e) {
    fail(ErrorCode::kValidation, "corrupt model manifest: " + std::string(e.what()));
  }
  PixelModel model(manifest.at("patch_radius").get<std::size_t>(),
                   manifest.at("hidden").get<std::size_t>(),
                   manifest.at("num_classes").get<std::size_t>());
  const Tensor params = load_tensor(dir / "model.calt");
  const auto* t = std::get_if<Float64Tensor>(&params);
  require(t != nullptr && t->dims.size() == 1, ErrorCode::kDtypeMismatch,
          "model parameters must be a rank-1 float64 tensor");
  model.set_parameters(t->data);
  return model;
}

std::vector<LogitField> forward_all(const PixelModel& model, const std::vector<Image>& images) {
  std::vector<LogitField> out;
  out.reserve(images.size());
  for (const auto& image : images) out.push_back(model.forward(image));
  return out;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the lowest-index failure.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::mutex mutex;
    std::size_t next = 0;
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < std::min(threads, n); ++w) {
      workers.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard lock(mutex);
            if (next >= n) return;
            i = next++;
          }
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string summary_csv(const std::vector<std::vector<MetricReport>>& per_method,
                        const ExperimentConfig& cfg) {
  std::string text = "method,cases,dsc_mean,asd_mean,ece,cece,nll\n";
  for (std::size_t m = 0; m < per_method.size(); ++m) {
    const auto& reports = per_method[m];
    double dsc_sum = 0, ece_sum = 0, cece_sum = 0, nll_sum = 0, asd_sum = 0;
    std::size_t asd_n = 0;
    for (const auto& r : reports) {
      dsc_sum += r.dsc_mean;
      ece_sum += r.ece;
      cece_sum += r.cece;
      nll_sum += r.nll;
      if (r.asd_mean) {
        asd_sum += *r.asd_mean;
        ++asd_n;
      }
    }
    const double n = static_cast<double>(reports.size());
    text += join({cfg.losses[m].name, std::to_string(reports.size()), format_double(dsc_sum / n),
                  asd_n > 0 ? format_double(asd_sum / static_cast<double>(asd_n)) : "NA",
                  format_double(ece_sum / n), format_double(cece_sum / n),
                  format_double(nll_sum / n)});
  }
  return text;
}

json reports_json(const std::vector<MetricReport>& reports) {
  json out = json::array();
  for (const auto& r : reports) {
    json asd_classes = json::array();
    for (const auto& v : r.asd_per_class) asd_classes.push_back(v ? json(*v) : json(nullptr));
    out.push_back({{"method", r.method},
                   {"case", r.case_id},
                   {"dsc_mean", r.dsc_mean},
                   {"asd_mean", r.asd_mean ? json(*r.asd_mean) : json(nullptr)},
                   {"ece", r.ece},
                   {"cece", r.cece},
                   {"nll", r.nll},
                   {"dsc_per_class", r.dsc_per_class},
                   {"asd_per_class", asd_classes}});
  }
  return out;
}

std::pair<LogitField, LabelField> stack_cases(const std::vector<LogitField>& logits,
                                              const std::vector<LabelField>& labels) {
  const auto& first = logits.front();
  std::vector<double> values;
  std::vector<std::int32_t> label_values;
  std::size_t rows = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    require(logits[i].width() == first.width(), ErrorCode::kShapeMismatch,
            "cases must share a width to be pooled");
    values.insert(values.end(), logits[i].values().begin(), logits[i].values().end());
    label_values.insert(label_values.end(), labels[i].values().begin(), labels[i].values().end());
    rows += logits[i].height();
  }
  return {LogitField(rows, first.width(), first.num_classes(), std::move(values)),
          LabelField(rows, first.width(), first.num_classes(), std::move(label_values),
                     labels.front().background_class())};
}

std::optional<std::map<std::string, double>> load_temperatures(const fs::path& out) {
  const fs::path path = out / "calibrate" / "temperatures.json";
  if (!fs::exists(path)) return std::nullopt;
  const json j = json::parse(read_text(path));
  std::map<std::string, double> temps;
  for (const auto& [method, fit] : j.items()) temps[method] = fit.at("temperature").get<double>();
  return temps;
}

// Per-method outputs recorded in the manifest.
using OutputMap = std::map<std::string, std::vector<std::string>>;

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string rel(const fs::path& path, const fs::path& base) {
  return fs::relative(path, base).generic_string();
}

// ---------------------------------------------------------------- commands

void cmd_train(RunContext& ctx, OutputMap& outputs, std::map<std::string, double>& timings) {
  const auto& cfg = ctx.config;
  const Dataset data = generate_dataset(cfg.task);
  fs::create_directories(data_dir(ctx.out));
  save_split(data.train, data_dir(ctx.out), "train");
  save_split(data.val, data_dir(ctx.out), "val");
  save_split(data.test, data_dir(ctx.out), "test");

  const std::size_t n = cfg.losses.size();
  std::vector<double> seconds(n, 0.0);
  parallel_for(n, ctx.threads, [&](std::size_t i) {
    const auto start = std::chrono::steady_clock::now();
    const auto& loss = cfg.losses[i];
    PixelModel model(cfg.patch_radius, cfg.hidden, cfg.task.num_classes);
    model.initialize(cfg.seed);
    const TrainResult result = train(model, data, loss.config, cfg.schedule, cfg.seed, cfg.metrics);
    const fs::path dir = model_dir(ctx.out, loss.name);
    fs::create_directories(dir);
    save_model(result.model, loss, result.best_epoch, dir);

    std::string log = "epoch,lr,train_loss,val_dsc,val_ece\n";
    for (const auto& e : result.log) {
      log += join({std::to_string(e.epoch), format_double(e.lr), format_double(e.train_loss),
                   format_double(e.val_dsc), format_double(e.val_ece)});
    }
    write_text(dir / "log.csv", log);

    const LogitProfile profile = logit_distance_profile(result.model, data.test);
    std::string text = "gt_class,pixel_count";
    for (std::size_t c = 0; c < cfg.task.num_classes; ++c) text += ",mean_logit_" + std::to_string(c);
    for (std::size_t c = 0; c < cfg.task.num_classes; ++c) text += ",mean_distance_" + std::to_string(c);
    text += '\n';
    for (const auto& entry : profile.classes) {
      std::vector<std::string> row{std::to_string(entry.gt_class),
                                   std::to_string(entry.pixel_count)};
      for (double v : entry.mean_logits) row.push_back(format_double(v));
      for (double v : entry.mean_distances) row.push_back(format_double(v));
      text += join(row);
    }
    write_text(dir / "profile.csv", text);
    seconds[i] = seconds_since(start);
  });
  for (std::size_t i = 0; i < n; ++i) {
    const auto& name = cfg.losses[i].name;
    const fs::path dir = model_dir(ctx.out, name);
    outputs[name] = {rel(dir / "model.calt", ctx.out), rel(dir / "model.json", ctx.out),
                     rel(dir / "log.csv", ctx.out), rel(dir / "profile.csv", ctx.out)};
    timings[name] = seconds[i];
  }
}

// Evaluates every method on a split, optionally with per-method temperatures.
std::vector<std::vector<MetricReport>> evaluate_methods(
    const RunContext& ctx, const Split& split,
    const std::optional<std::map<std::string, double>>& temps, std::vector<double>& seconds) {
  const auto& cfg = ctx.config;
  const std::size_t n = cfg.losses.size();
  std::vector<std::vector<MetricReport>> reports(n);
  seconds.assign(n, 0.0);
  parallel_for(n, ctx.threads, [&](std::size_t i) {
    const auto start = std::chrono::steady_clock::now();
    const auto& name = cfg.losses[i].name;
    const PixelModel model = load_model(model_dir(ctx.out, name));
    double t = 1.0;
    if (temps) {
      const auto it = temps->find(name);
      require(it != temps->end(), ErrorCode::kValidation, "no temperature for " + name);
      t = it->second;
    }
    reports[i] = evaluate_cases(name, forward_all(model, split.images), split.labels, cfg.metrics, t);
    seconds[i] = seconds_since(start);
  });
  return reports;
}

void write_reports(const RunContext& ctx, const std::vector<std::vector<MetricReport>>& reports,
                   const std::string& suffix, OutputMap& outputs) {
  std::vector<MetricReport> flat;
  json all = json::array();
  for (const auto& per : reports) {
    flat.insert(flat.end(), per.begin(), per.end());
    for (auto& item : reports_json(per)) all.push_back(item);
  }
  const fs::path csv = ctx.command_dir / ("report" + suffix + ".csv");
  const fs::path summary = ctx.command_dir / ("summary" + suffix + ".csv");
  const fs::path js = ctx.command_dir / ("report" + suffix + ".json");
  write_text(csv, reports_csv(flat, ctx.config.task.num_classes));
  write_text(summary, summary_csv(reports, ctx.config));
  write_text(js, all.dump(2) + "\n");
  for (const auto& loss : ctx.config.losses) {
    for (const auto& p : {csv, summary, js}) outputs[loss.name].push_back(rel(p, ctx.out));
  }
}

void cmd_eval(RunContext& ctx, OutputMap& outputs, std::map<std::string, double>& timings) {
  const auto& cfg = ctx.config;
  const Split test = load_split(data_dir(ctx.out), "test", cfg.task.num_classes, cfg.background_class);
  std::vector<double> seconds;
  const auto reports = evaluate_methods(ctx, test, std::nullopt, seconds);
  write_reports(ctx, reports, "", outputs);
  for (std::size_t i = 0; i < cfg.losses.size(); ++i) timings[cfg.losses[i].name] = seconds[i];
}

void cmd_calibrate(RunContext& ctx, OutputMap& outputs, std::map<std::string, double>& timings) {
  const auto& cfg = ctx.config;
  require(cfg.temperature_scaling, ErrorCode::kConfig,
          "temperature_scaling.enabled is false in this config");
  const Split val = load_split(data_dir(ctx.out), "val", cfg.task.num_classes, cfg.background_class);
  const Split test = load_split(data_dir(ctx.out), "test", cfg.task.num_classes, cfg.background_class);
  const std::size_t n = cfg.losses.size();
  std::vector<TemperatureFit> fits(n);
  std::vector<double> seconds(n, 0.0);
  parallel_for(n, ctx.threads, [&](std::size_t i) {
    const auto start = std::chrono::steady_clock::now();
    const PixelModel model = load_model(model_dir(ctx.out, cfg.losses[i].name));
    fits[i] = fit_temperature(forward_all(model, val.images), val.labels, cfg.ts_search);
    seconds[i] = seconds_since(start);
  });
  json temps = json::object();
  std::map<std::string, double> by_name;
  for (std::size_t i = 0; i < n; ++i) {
    temps[cfg.losses[i].name] = {{"temperature", fits[i].temperature},
                                 {"nll_before", fits[i].nll_before},
                                 {"nll_after", fits[i].nll_after},
                                 {"iterations", fits[i].iterations}};
    by_name[cfg.losses[i].name] = fits[i].temperature;
  }
  const fs::path temps_path = ctx.command_dir / "temperatures.json";
  write_text(temps_path, temps.dump(2) + "\n");
  for (const auto& loss : cfg.losses) outputs[loss.name].push_back(rel(temps_path, ctx.out));

  std::vector<double> eval_seconds;
  const auto reports = evaluate_methods(ctx, test, by_name, eval_seconds);
  write_reports(ctx, reports, "_ts", outputs);
  for (std::size_t i = 0; i < n; ++i) timings[cfg.losses[i].name] = seconds[i] + eval_seconds[i];
}

void cmd_perturb(RunContext& ctx, OutputMap& outputs, std::map<std::string, double>& timings) {
  const auto& cfg = ctx.config;
  const Split test = load_split(data_dir(ctx.out), "test", cfg.task.num_classes, cfg.background_class);
  const auto temps = load_temperatures(ctx.out);
  const std::size_t n = cfg.losses.size();
  std::vector<std::vector<std::vector<std::string>>> rows(n);
  std::vector<double> seconds(n, 0.0);
  parallel_for(n, ctx.threads, [&](std::size_t i) {
    const auto start = std::chrono::steady_clock::now();
    const auto& name = cfg.losses[i].name;
    const PixelModel model = load_model(model_dir(ctx.out, name));
    for (std::size_t s = 0; s < cfg.noise_grid.size(); ++s) {
      const double sigma = cfg.noise_grid[s];
      const auto images =
          perturb_gaussian(test.images, sigma, Rng::derive(cfg.seed, SeedPurpose::kNoise, s));
      const auto logits = forward_all(model, images);
      const auto reports = evaluate_cases(name, logits, test.labels, cfg.metrics);
      double dsc_sum = 0, ece_sum = 0, cece_sum = 0;
      for (const auto& r : reports) {
        dsc_sum += r.dsc_mean;
        ece_sum += r.ece;
        cece_sum += r.cece;
      }
      const double count = static_cast<double>(reports.size());
      std::vector<std::string> row{name, format_double(sigma), format_double(dsc_sum / count),
                                   format_double(ece_sum / count), format_double(cece_sum / count)};
      if (temps) {
        const double t = temps->at(name);
        const auto scaled = evaluate_cases(name, logits, test.labels, cfg.metrics, t);
        double ece_ts = 0, cece_ts = 0;
        for (const auto& r : scaled) {
          ece_ts += r.ece;
          cece_ts += r.cece;
        }
        row.push_back(format_double(ece_ts / count));
        row.push_back(format_double(cece_ts / count));
      }
      rows[i].push_back(std::move(row));
    }
    seconds[i] = seconds_since(start);
  });
  std::string text = temps ? "method,sigma,dsc_mean,ece,cece,ece_ts,cece_ts\n"
                           : "method,sigma,dsc_mean,ece,cece\n";
  for (const auto& per : rows) {
    for (const auto& row : per) text += join(row);
  }
  const fs::path path = ctx.command_dir / "noise.csv";
  write_text(path, text);
  for (std::size_t i = 0; i < n; ++i) {
    outputs[cfg.losses[i].name].push_back(rel(path, ctx.out));
    timings[cfg.losses[i].name] = seconds[i];
  }
}

void cmd_rank(RunContext& ctx, OutputMap& outputs, std::map<std::string, double>& timings) {
  const auto& cfg = ctx.config;
  const auto start = std::chrono::steady_clock::now();
  std::vector<fs::path> inputs = cfg.rank_inputs;
  if (inputs.empty()) inputs.push_back(ctx.out / "eval" / "report.csv");
  std::vector<CsvTable> tables;
  for (const auto& p : inputs) {
    require(fs::exists(p), ErrorCode::kValidation, "ranking input not found: " + p.string());
    tables.push_back(parse_csv(read_text(p)));
  }
  const RankOutputs ranks = rank_reports(tables, cfg.rank_metrics);

  std::vector<std::string> header{"method"};
  for (const auto& m : cfg.rank_metrics) {
    header.push_back(m.name);
    header.push_back(m.name + "_rank");
  }
  header.insert(header.end(), {"total", "final_rank"});
  std::string sum_text = join(header);
  json sum_json = json::array();
  for (std::size_t i = 0; i < ranks.sum.methods.size(); ++i) {
    std::vector<std::string> row{ranks.sum.methods[i]};
    json entry{{"method", ranks.sum.methods[i]}};
    for (std::size_t m = 0; m < cfg.rank_metrics.size(); ++m) {
      row.push_back(format_double(ranks.sum.scores[i][m]));
      row.push_back(format_double(ranks.sum.ranks[i][m]));
      entry["ranks"][cfg.rank_metrics[m].name] = ranks.sum.ranks[i][m];
    }
    row.push_back(format_double(ranks.sum.total[i]));
    row.push_back(format_double(ranks.sum.final_rank[i]));
    entry["total"] = ranks.sum.total[i];
    entry["final_rank"] = ranks.sum.final_rank[i];
    sum_text += join(row);
    sum_json.push_back(entry);
  }
  std::string case_text = "method,mean_case_rank,final_rank\n";
  json case_json = json::array();
  for (std::size_t i = 0; i < ranks.per_case.methods.size(); ++i) {
    case_text += join({ranks.per_case.methods[i], format_double(ranks.per_case.mean_rank[i]),
                       format_double(ranks.per_case.final_rank[i])});
    case_json.push_back({{"method", ranks.per_case.methods[i]},
                         {"mean_case_rank", ranks.per_case.mean_rank[i]},
                         {"final_rank", ranks.per_case.final_rank[i]}});
  }
  const fs::path sum_path = ctx.command_dir / "sum_rank.csv";
  const fs::path case_path = ctx.command_dir / "mean_case_rank.csv";
  const fs::path json_path = ctx.command_dir / "ranking.json";
  write_text(sum_path, sum_text);
  write_text(case_path, case_text);
  write_text(json_path, json{{"sum_rank", sum_json}, {"mean_case_rank", case_json}}.dump(2) + "\n");
  const double elapsed = seconds_since(start);
  for (const auto& method : ranks.sum.methods) {
    outputs[method] = {rel(sum_path, ctx.out), rel(case_path, ctx.out), rel(json_path, ctx.out)};
    timings[method] = elapsed;
  }
}

void cmd_reliability(RunContext& ctx, OutputMap& outputs, std::map<std::string, double>& timings) {
  const auto& cfg = ctx.config;
  const Split test = load_split(data_dir(ctx.out), "test", cfg.task.num_classes, cfg.background_class);
  const auto temps = load_temperatures(ctx.out);
  const std::size_t n = cfg.losses.size();
  std::vector<double> seconds(n, 0.0);
  parallel_for(n, ctx.threads, [&](std::size_t i) {
    const auto start = std::chrono::steady_clock::now();
    const auto& name = cfg.losses[i].name;
    const PixelModel model = load_model(model_dir(ctx.out, name));
    const auto [logits, labels] = stack_cases(forward_all(model, test.images), test.labels);
    const PixelMask mask = foreground_mask(predict(logits, labels.background_class()), labels,
                                           cfg.metrics.mask);
    write_text(ctx.command_dir / (name + ".csv"),
               reliability_csv(ece(softmax(logits), labels, mask, cfg.metrics.num_bins).table));
    if (temps) {
      const auto probs = apply_temperature(logits, temps->at(name));
      write_text(ctx.command_dir / (name + "_ts.csv"),
                 reliability_csv(ece(probs, labels, mask, cfg.metrics.num_bins).table));
    }
    seconds[i] = seconds_since(start);
  });
  for (std::size_t i = 0; i < n; ++i) {
    const auto& name = cfg.losses[i].name;
    outputs[name].push_back(rel(ctx.command_dir / (name + ".csv"), ctx.out));
    if (temps) outputs[name].push_back(rel(ctx.command_dir / (name + "_ts.csv"), ctx.out));
    timings[name] = seconds[i];
  }
}

}  // namespace

void run_command(Command command, const ExperimentConfig& config, const RunOptions& options) {
  require(!config.output_dir.empty(), ErrorCode::kConfig,
          "no output directory (set output_dir or pass --out)");
  const fs::path out = config.output_dir;
  const std::string name = to_string(command);
  const std::string hash = config.hash();
  const fs::path manifest_path = out / "manifest.json";

  json manifest = json::object();
  if (fs::exists(manifest_path)) {
    try {
      manifest = json::parse(read_text(manifest_path));
    } catch (const json::exception& e) {
      fail(ErrorCode::kValidation, "corrupt manifest: " + std::string(e.what()));
    }
    const std::string previous = manifest.value("config_hash", "");
    if (previous != hash) {
      require(options.force, ErrorCode::kAlreadyCompleted,
              out.string() + " holds a run with config hash " + previous +
                  "; pass --force to overwrite");
      manifest = json::object();
    } else if (manifest.contains("commands") && manifest["commands"].contains(name)) {
      require(options.force, ErrorCode::kAlreadyCompleted,
              "command '" + name + "' already completed for config hash " + hash +
                  "; pass --force to rerun");
    }
  }

  RunContext ctx{config, out, out / name, std::max<std::size_t>(1, options.threads)};
  fs::remove_all(ctx.command_dir);
  fs::create_directories(ctx.command_dir);
  const fs::path marker = ctx.command_dir / "PARTIAL";
  write_text(marker, "running\n");

  OutputMap outputs;
  std::map<std::string, double> timings;
  const auto start = std::chrono::steady_clock::now();
  try {
    switch (command) {
      case Command::kTrain: cmd_train(ctx, outputs, timings); break;
      case Command::kEval: cmd_eval(ctx, outputs, timings); break;
      case Command::kCalibrate: cmd_calibrate(ctx, outputs, timings); break;
      case Command::kPerturb: cmd_perturb(ctx, outputs, timings); break;
      case Command::kRank: cmd_rank(ctx, outputs, timings); break;
      case Command::kReliability: cmd_reliability(ctx, outputs, timings); break;
    }
  } catch (const std::exception& e) {
    write_text(marker, std::string("failed: ") + e.what() + "\n");
    throw;
  }
  fs::remove(marker);

  json entry{{"completed", true}, {"wall_seconds", seconds_since(start)}};
  for (const auto& [method, paths] : outputs) {
    entry["methods"][method] = {{"outputs", paths}, {"wall_seconds", timings[method]}};
  }
  manifest["artifact_version"] = kArtifactVersion;
  manifest["config_hash"] = hash;
  manifest["commands"][name] = entry;
  write_atomic(manifest_path, manifest.dump(2) + "\n");
}

}  // namespace calmargin
