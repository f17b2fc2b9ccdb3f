#include "experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "checkpoint.hpp"
#include "error.hpp"

namespace bkn {

namespace {

// ---------------------------------------------------------------------------
// Value parsing and formatting

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(std::string_view key, std::string_view text) {
  const std::string s = trim(text);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError(std::string(key) + ": expected a number, got '" + s + "'");
  }
  return v;
}

std::uint64_t parse_uint(std::string_view key, std::string_view text) {
  const std::string s = trim(text);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError(std::string(key) + ": expected a nonnegative integer, got '" + s + "'");
  }
  return v;
}

std::vector<std::size_t> parse_uint_list(std::string_view key, std::string_view text) {
  std::vector<std::size_t> out;
  const std::string s = trim(text);
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = s.find(',', start);
    out.push_back(parse_uint(key, std::string_view(s).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string format_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

struct Field {
  const char* key;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field size_field(const char* key, T ExperimentConfig::*member) {
  return Field{key,
               [key, member](ExperimentConfig& c, std::string_view v) {
                 c.*member = static_cast<T>(parse_uint(key, v));
               },
               [member](const ExperimentConfig& c) { return std::to_string(c.*member); }};
}

Field double_field(const char* key, double ExperimentConfig::*member) {
  return Field{key,
               [key, member](ExperimentConfig& c, std::string_view v) {
                 c.*member = parse_double(key, v);
               },
               [member](const ExperimentConfig& c) { return format_double(c.*member); }};
}

Field string_field(const char* key, std::string ExperimentConfig::*member) {
  return Field{key, [member](ExperimentConfig& c, std::string_view v) { c.*member = trim(v); },
               [member](const ExperimentConfig& c) { return c.*member; }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"dataset",
            [](ExperimentConfig& c, std::string_view v) {
              const std::string s = trim(v);
              if (s != "synthetic" && s != "cifar10") {
                throw ConfigError("dataset: expected synthetic or cifar10, got '" + s + "'");
              }
              c.dataset = s;
            },
            [](const ExperimentConfig& c) { return c.dataset; }},
      Field{"synthetic.classes",
            [](ExperimentConfig& c, std::string_view v) {
              c.synth_classes = static_cast<int>(parse_uint("synthetic.classes", v));
            },
            [](const ExperimentConfig& c) { return std::to_string(c.synth_classes); }},
      size_field("synthetic.train_per_class", &ExperimentConfig::synth_train_per_class),
      size_field("synthetic.test_per_class", &ExperimentConfig::synth_test_per_class),
      size_field("synthetic.channels", &ExperimentConfig::synth_channels),
      size_field("synthetic.height", &ExperimentConfig::synth_height),
      size_field("synthetic.width", &ExperimentConfig::synth_width),
      double_field("synthetic.spread", &ExperimentConfig::synth_spread),
      size_field("synthetic.seed", &ExperimentConfig::synth_seed),
      string_field("cifar.dir", &ExperimentConfig::cifar_dir),
      size_field("cifar.train_limit", &ExperimentConfig::cifar_train_limit),
      size_field("cifar.test_limit", &ExperimentConfig::cifar_test_limit),
      Field{"arch.widths",
            [](ExperimentConfig& c, std::string_view v) {
              c.widths = parse_uint_list("arch.widths", v);
            },
            [](const ExperimentConfig& c) { return format_list(c.widths); }},
      Field{"norm",
            [](ExperimentConfig& c, std::string_view v) {
              try {
                c.norm = parse_norm_kind(trim(v));
              } catch (const Error& e) {
                throw ConfigError(std::string("norm: ") + e.what());
              }
            },
            [](const ExperimentConfig& c) { return std::string(to_string(c.norm)); }},
      Field{"cov_mode",
            [](ExperimentConfig& c, std::string_view v) {
              const std::string s = trim(v);
              if (s == "diag") {
                c.cov_mode = CovMode::diag;
              } else if (s == "full") {
                c.cov_mode = CovMode::full;
              } else {
                throw ConfigError("cov_mode: expected diag or full, got '" + s + "'");
              }
            },
            [](const ExperimentConfig& c) {
              return std::string(c.cov_mode == CovMode::diag ? "diag" : "full");
            }},
      double_field("alpha", &ExperimentConfig::alpha),
      double_field("eps", &ExperimentConfig::eps),
      Field{"pinned_gain",
            [](ExperimentConfig& c, std::string_view v) {
              const std::string s = trim(v);
              if (s.empty() || s == "none") {
                c.pinned_gain.reset();
              } else {
                c.pinned_gain = parse_double("pinned_gain", s);
              }
            },
            [](const ExperimentConfig& c) {
              return c.pinned_gain ? format_double(*c.pinned_gain) : std::string("none");
            }},
      double_field("brn.r_max", &ExperimentConfig::brn_r_max),
      double_field("brn.d_max", &ExperimentConfig::brn_d_max),
      size_field("brn.warmup_steps", &ExperimentConfig::brn_warmup_steps),
      size_field("brn.ramp_steps", &ExperimentConfig::brn_ramp_steps),
      size_field("gradient_batch", &ExperimentConfig::gradient_batch),
      size_field("statistics_batch", &ExperimentConfig::statistics_batch),
      double_field("lr", &ExperimentConfig::lr),
      double_field("momentum", &ExperimentConfig::momentum),
      Field{"lr.decay_steps",
            [](ExperimentConfig& c, std::string_view v) {
              c.lr_decay_steps = parse_uint_list("lr.decay_steps", v);
            },
            [](const ExperimentConfig& c) { return format_list(c.lr_decay_steps); }},
      double_field("lr.decay_factor", &ExperimentConfig::lr_decay_factor),
      size_field("seed", &ExperimentConfig::seed),
      size_field("steps", &ExperimentConfig::steps),
      size_field("eval_every", &ExperimentConfig::eval_every),
      string_field("out", &ExperimentConfig::out_dir),
      string_field("preset", &ExperimentConfig::preset),
      string_field("reference_setting", &ExperimentConfig::reference_setting),
  };
  return table;
}

const Field& find_field(std::string_view key) {
  for (const Field& f : fields()) {
    if (key == f.key) return f;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  if (is.bad()) throw IoError("failed reading " + path.string());
  return ss.str();
}

/// Writes a whole file and reports any stream failure against that file.
void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  os.flush();
  if (!os) throw IoError("failed writing " + path.string() + " (disk full?)");
}

std::filesystem::path resolve_cifar_dir(const ExperimentConfig& cfg) {
  if (!cfg.cifar_dir.empty()) return cfg.cifar_dir;
  if (const char* env = std::getenv(kDataRootEnv); env && *env) return env;
  return {};
}

std::string format_metrics_row(const MetricsRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.10g,%.6f,%.6f\n", r.step, r.epoch, r.train_loss,
                r.eval_acc_moving, r.eval_acc_batch);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

NormSettings ExperimentConfig::norm_settings() const {
  NormSettings s;
  s.kind = norm;
  s.cov_mode = cov_mode;
  s.alpha = alpha;
  s.eps = eps;
  s.pinned_gain = pinned_gain;
  return s;
}

DeskArchitecture ExperimentConfig::architecture(std::size_t in_channels,
                                                std::size_t classes) const {
  return DeskArchitecture{in_channels, widths, classes};
}

double ExperimentConfig::lr_at(std::size_t step) const {
  double rate = lr;
  for (std::size_t s : lr_decay_steps) {
    if (step >= s) rate *= lr_decay_factor;
  }
  return rate;
}

BrnLimits ExperimentConfig::brn_limits_at(std::size_t step) const {
  if (step < brn_warmup_steps) return BrnLimits{1.0, 0.0};
  const double frac =
      brn_ramp_steps == 0
          ? 1.0
          : std::min(1.0, static_cast<double>(step - brn_warmup_steps) /
                              static_cast<double>(brn_ramp_steps));
  return BrnLimits{1.0 + frac * (brn_r_max - 1.0), frac * brn_d_max};
}

void set_config_value(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  find_field(trim(key)).set(cfg, value);
}

std::string get_config_value(const ExperimentConfig& cfg, std::string_view key) {
  return find_field(trim(key)).get(cfg);
}

ExperimentConfig parse_config(std::string_view text, ExperimentConfig base) {
  const std::string body = trim(text);
  if (!body.empty() && body.front() == '{') {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed JSON config: ") + e.what());
    }
    if (!doc.is_object()) throw ConfigError("JSON config must be an object");
    for (const auto& [key, value] : doc.items()) {
      std::string text_value;
      if (value.is_string()) {
        text_value = value.get<std::string>();
      } else if (value.is_number_integer() || value.is_number_unsigned()) {
        text_value = value.dump();
      } else if (value.is_number_float()) {
        text_value = format_double(value.get<double>());
      } else if (value.is_null()) {
        text_value = "none";
      } else if (value.is_array()) {
        for (std::size_t i = 0; i < value.size(); ++i) {
          if (!value[i].is_number_unsigned() && !value[i].is_number_integer()) {
            throw ConfigError(key + ": arrays must hold integers");
          }
          if (i) text_value += ',';
          text_value += value[i].dump();
        }
      } else {
        throw ConfigError(key + ": unsupported JSON value " + value.dump());
      }
      set_config_value(base, key, text_value);
    }
    return base;
  }

  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    try {
      set_config_value(base, line.substr(0, eq), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

ExperimentConfig load_config_file(const std::filesystem::path& path, ExperimentConfig base) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const IoError&) {
    throw ConfigError("config file " + path.string() + " not found or unreadable");
  }
  try {
    return parse_config(text, std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const Field& f : fields()) {
    out += f.key;
    out += " = ";
    out += f.get(cfg);
    out += '\n';
  }
  return out;
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const Field& f : fields()) {
    if (std::string_view(f.key) == "out") continue;
    const std::string line = std::string(f.key) + "=" + f.get(cfg) + "\n";
    for (unsigned char ch : line) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void validate_config(const ExperimentConfig& cfg) {
  if (cfg.gradient_batch == 0 || cfg.statistics_batch == 0) {
    throw ConfigError("batch sizes must be at least 1");
  }
  if (cfg.gradient_batch % cfg.statistics_batch != 0) {
    throw ConfigError("statistics_batch " + std::to_string(cfg.statistics_batch) +
                      " does not divide gradient_batch " + std::to_string(cfg.gradient_batch));
  }
  if (cfg.widths.empty()) throw ConfigError("arch.widths must list at least one width");
  if (std::find(cfg.widths.begin(), cfg.widths.end(), 0u) != cfg.widths.end()) {
    throw ConfigError("arch.widths entries must be positive");
  }
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(cfg.eps > 0.0)) throw ConfigError("eps must be positive");
  if (cfg.pinned_gain && !(*cfg.pinned_gain > 0.0 && *cfg.pinned_gain <= 1.0)) {
    throw ConfigError("pinned_gain must lie in (0, 1]");
  }
  if (!(cfg.brn_r_max >= 1.0) || !(cfg.brn_d_max >= 0.0)) {
    throw ConfigError("brn.r_max must be >= 1 and brn.d_max >= 0");
  }
  if (!(cfg.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(cfg.lr_decay_factor > 0.0)) throw ConfigError("lr.decay_factor must be positive");
  if (cfg.steps == 0) throw ConfigError("steps must be at least 1");
  if (cfg.eval_every == 0) throw ConfigError("eval_every must be at least 1");
  if (cfg.out_dir.empty()) throw ConfigError("out must name a directory");
  if (cfg.cov_mode == CovMode::full) {
    for (std::size_t w : cfg.widths) {
      if (w > kMaxFullCovChannels) {
        throw ConfigError("full covariance mode supports at most " +
                          std::to_string(kMaxFullCovChannels) + " channels");
      }
    }
  }
  if (cfg.dataset == "synthetic") {
    if (cfg.synth_classes < 2) throw ConfigError("synthetic.classes must be at least 2");
    if (cfg.synth_train_per_class == 0 || cfg.synth_test_per_class == 0 ||
        cfg.synth_channels == 0 || cfg.synth_height == 0 || cfg.synth_width == 0) {
      throw ConfigError("synthetic sizes must be positive");
    }
    if (!(cfg.synth_spread >= 0.0)) throw ConfigError("synthetic.spread must be nonnegative");
    const std::size_t n = cfg.synth_train_per_class * static_cast<std::size_t>(cfg.synth_classes);
    if (cfg.gradient_batch > n) {
      throw ConfigError("gradient_batch " + std::to_string(cfg.gradient_batch) +
                        " exceeds the training set size " + std::to_string(n));
    }
  } else {
    const std::filesystem::path dir = resolve_cifar_dir(cfg);
    if (dir.empty()) {
      throw ConfigError(std::string("cifar10 needs cifar.dir or the ") + kDataRootEnv +
                        " environment variable");
    }
    for (const char* name : {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                             "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"}) {
      if (!std::filesystem::is_regular_file(dir / name)) {
        throw ConfigError("missing CIFAR-10 file " + (dir / name).string());
      }
    }
    if (cfg.cifar_train_limit > 0 && cfg.gradient_batch > cfg.cifar_train_limit) {
      throw ConfigError("gradient_batch exceeds cifar.train_limit");
    }
  }
}

// ---------------------------------------------------------------------------
// Presets

namespace {

struct PresetSpec {
  const char* name;
  std::size_t gradient_batch;
  std::size_t statistics_batch;
  const char* reference_setting;
};

// The (256,4) setting is halved to (128,2) so that its statistics batch is
// the smallest the desk comparison uses while the 64x ratio is kept.
constexpr PresetSpec kPresets[] = {
    {"baseline", 128, 128, "gradient = statistics batch (no accumulation)"},
    {"256x4", 128, 2, "(256,4)"},
    {"256x1", 256, 1, "(256,1)"},
    {"64x8", 64, 8, "(64,8)"},
    {"16x4", 16, 4, "(16,4)"},
    {"8x2", 8, 2, "(8,2)"},
};

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const PresetSpec& p : kPresets) out.emplace_back(p.name);
  return out;
}

ExperimentConfig preset(const std::string& name) {
  for (const PresetSpec& p : kPresets) {
    if (name != p.name) continue;
    ExperimentConfig cfg;
    cfg.gradient_batch = p.gradient_batch;
    cfg.statistics_batch = p.statistics_batch;
    // Small gradient batches take proportionally smaller steps.
    cfg.lr = 0.1 * std::min(1.0, static_cast<double>(p.gradient_batch) / 64.0);
    cfg.preset = p.name;
    cfg.reference_setting = p.reference_setting;
    cfg.out_dir = std::string("runs/") + p.name;
    return cfg;
  }
  std::string known;
  for (const PresetSpec& p : kPresets) known += std::string(known.empty() ? "" : ", ") + p.name;
  throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
}

// ---------------------------------------------------------------------------
// Training

Datasets load_datasets(const ExperimentConfig& cfg) {
  if (cfg.dataset == "synthetic") {
    SyntheticSpec spec;
    spec.classes = cfg.synth_classes;
    spec.per_class = cfg.synth_train_per_class;
    spec.channels = cfg.synth_channels;
    spec.height = cfg.synth_height;
    spec.width = cfg.synth_width;
    spec.spread = cfg.synth_spread;
    spec.seed = cfg.synth_seed;
    Datasets d{synth_gaussian_mixture(spec), {}};
    spec.per_class = cfg.synth_test_per_class;
    d.test = synth_gaussian_mixture_split(spec, 1);
    return d;
  }
  CifarSplit split =
      load_cifar10(resolve_cifar_dir(cfg), cfg.cifar_train_limit, cfg.cifar_test_limit);
  return Datasets{std::move(split.train), std::move(split.test)};
}

EvalResult evaluate_dataset(const Network& net, const Dataset& ds, std::size_t stats_batch) {
  if (ds.size() == 0) throw InvalidArgument("evaluation needs a nonempty dataset");
  if (stats_batch == 0) throw InvalidArgument("evaluation batch must be at least 1");
  constexpr std::size_t kInferChunk = 500;
  std::size_t moving = 0, batch = 0;
  for (std::size_t begin = 0; begin < ds.size(); begin += kInferChunk) {
    const Batch b = slice(ds, begin, std::min(kInferChunk, ds.size() - begin));
    moving += count_correct(net.evaluate(b.images, Mode::infer), b.labels);
  }
  for (std::size_t begin = 0; begin < ds.size(); begin += stats_batch) {
    const Batch b = slice(ds, begin, std::min(stats_batch, ds.size() - begin));
    batch += count_correct(net.evaluate(b.images, Mode::eval_batchstats), b.labels);
  }
  const double n = static_cast<double>(ds.size());
  return EvalResult{static_cast<double>(moving) / n, static_cast<double>(batch) / n};
}

RunSummary run_experiment(const ExperimentConfig& cfg) {
  validate_config(cfg);
  const Datasets data = load_datasets(cfg);
  const BatchPlan plan = cfg.plan();
  plan.validate(data.train.size());

  const std::filesystem::path dir = cfg.out_dir;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());

  RunSummary summary;
  summary.run_dir = dir;
  summary.config_hash = config_hash(cfg);
  write_text(dir / "config.txt", "# config_hash=" + summary.config_hash + "\n" +
                                     "# desk-scale run; absolute published numbers are not targets\n" +
                                     serialize_config(cfg));

  Network net = build_desk_network(
      cfg.architecture(data.train.images.dim(1), static_cast<std::size_t>(data.train.class_count)),
      cfg.norm_settings(), cfg.seed);
  SgdState sgd{cfg.lr, cfg.momentum, {}};

  std::string metrics = "# config_hash=" + summary.config_hash + "\n" + kMetricsColumns + "\n";
  std::string timing = "# config_hash=" + summary.config_hash +
                       "\nstep,ms_per_step,examples_per_sec\n";
  const std::filesystem::path metrics_path = dir / "metrics.csv";
  const std::filesystem::path timing_path = dir / "timing.csv";
  write_text(metrics_path, metrics);
  write_text(timing_path, timing);

  using Clock = std::chrono::steady_clock;
  std::size_t step = 0;
  double window_loss = 0.0, window_seconds = 0.0;
  std::size_t window_steps = 0;
  const double accumulation = static_cast<double>(plan.accumulation_count());

  for (std::size_t epoch = 0; step < cfg.steps; ++epoch) {
    const std::vector<GradientBatch> batches = iterate(plan, data.train.size(), epoch);
    for (const GradientBatch& gb : batches) {
      if (step >= cfg.steps) break;
      const auto t0 = Clock::now();
      sgd.lr = cfg.lr_at(step);
      if (cfg.norm == NormKind::brn) net.set_brn_limits(cfg.brn_limits_at(step));
      double loss = 0.0;
      try {
        net.zero_grad();
        for (const std::vector<std::size_t>& micro : gb.micro_batches) {
          const Batch b = gather(data.train, micro);
          const ForwardPass pass = net.forward(b.images, Mode::train);
          const LossResult l = softmax_cross_entropy(pass.logits, b.labels);
          net.backward(pass, l.grad);
          loss += l.loss;
          ++summary.passes;
        }
        loss /= accumulation;
        if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
        net.scale_grad(1.0 / accumulation);
        sgd_step(net, sgd);
      } catch (const NumericError& e) {
        save_checkpoint(dir / "checkpoint.bin", net.state());
        throw NumericError("step " + std::to_string(step) + ": " + e.what() +
                           "; checkpoint written to " + (dir / "checkpoint.bin").string());
      }
      const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
      ++step;
      summary.examples += cfg.gradient_batch;
      summary.train_seconds += seconds;
      window_seconds += seconds;
      window_loss += loss;
      ++window_steps;

      if (step % cfg.eval_every == 0 || step == cfg.steps) {
        const EvalResult ev = evaluate_dataset(net, data.test, cfg.statistics_batch);
        MetricsRow row;
        row.step = step;
        row.epoch = epoch;
        row.train_loss = window_loss / static_cast<double>(window_steps);
        row.eval_acc_moving = ev.acc_moving;
        row.eval_acc_batch = ev.acc_batch;
        row.ms_per_step = 1000.0 * window_seconds / static_cast<double>(window_steps);
        row.examples_per_sec = static_cast<double>(summary.examples) / summary.train_seconds;
        summary.rows.push_back(row);
        metrics += format_metrics_row(row);
        char buf[96];
        std::snprintf(buf, sizeof buf, "%zu,%.4f,%.2f\n", row.step, row.ms_per_step,
                      row.examples_per_sec);
        timing += buf;
        write_text(metrics_path, metrics);
        write_text(timing_path, timing);
        window_loss = window_seconds = 0.0;
        window_steps = 0;
      }
    }
  }
  summary.steps = step;
  summary.examples_per_sec = static_cast<double>(summary.examples) / summary.train_seconds;
  save_checkpoint(dir / "checkpoint.bin", net.state());

  const MetricsRow& last = summary.rows.back();
  nlohmann::ordered_json report;
  report["config_hash"] = summary.config_hash;
  report["preset"] = cfg.preset;
  report["reference_setting"] = cfg.reference_setting;
  report["norm"] = to_string(cfg.norm);
  report["gradient_batch"] = cfg.gradient_batch;
  report["statistics_batch"] = cfg.statistics_batch;
  report["seed"] = cfg.seed;
  report["steps"] = summary.steps;
  report["passes"] = summary.passes;
  report["examples"] = summary.examples;
  report["train_seconds"] = summary.train_seconds;
  report["examples_per_sec"] = summary.examples_per_sec;
  report["final_train_loss"] = last.train_loss;
  report["final_eval_acc_moving"] = last.eval_acc_moving;
  report["final_eval_acc_batch"] = last.eval_acc_batch;
  report["absolute_targets"] = "none at desk scale";
  write_text(dir / "report.json", report.dump(2) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// Comparison

MetricsFile read_metrics(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  MetricsFile out;
  std::istringstream is(text);
  std::string line;
  bool header_seen = false;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string tag = "# config_hash=";
      if (line.rfind(tag, 0) == 0) out.config_hash = line.substr(tag.size());
      continue;
    }
    if (!header_seen) {
      if (line != kMetricsColumns) {
        throw IoError(path.string() + ": unexpected metrics header '" + line + "'");
      }
      header_seen = true;
      continue;
    }
    MetricsRow r;
    char tail = 0;
    unsigned long long step = 0, epoch = 0;
    if (std::sscanf(line.c_str(), "%llu,%llu,%lf,%lf,%lf%c", &step, &epoch, &r.train_loss,
                    &r.eval_acc_moving, &r.eval_acc_batch, &tail) != 5) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": corrupt metrics row");
    }
    r.step = step;
    r.epoch = epoch;
    if (!out.rows.empty() && r.step <= out.rows.back().step) {
      throw IoError(path.string() + ":" + std::to_string(line_no) +
                    ": steps are not strictly increasing");
    }
    out.rows.push_back(r);
  }
  if (!header_seen) throw IoError(path.string() + ": missing metrics header");
  if (out.rows.empty()) throw IoError(path.string() + ": no metrics rows");
  return out;
}

Comparison compare_runs(const std::vector<std::filesystem::path>& dirs,
                        const std::vector<double>& thresholds) {
  if (dirs.size() < 2) throw InvalidArgument("compare needs at least two run directories");
  Comparison cmp;
  cmp.runs = dirs;
  cmp.thresholds = thresholds;
  std::vector<MetricsFile> files;
  for (const auto& d : dirs) files.push_back(read_metrics(d / "metrics.csv"));

  std::set<std::size_t> common;
  for (const MetricsRow& r : files[0].rows) common.insert(r.step);
  for (std::size_t i = 1; i < files.size(); ++i) {
    std::set<std::size_t> mine, both;
    for (const MetricsRow& r : files[i].rows) mine.insert(r.step);
    std::set_intersection(common.begin(), common.end(), mine.begin(), mine.end(),
                          std::inserter(both, both.end()));
    common = std::move(both);
  }
  cmp.steps.assign(common.begin(), common.end());
  if (cmp.steps.empty()) throw IoError("runs share no evaluation step");

  auto row_at = [&](std::size_t run, std::size_t step) -> const MetricsRow& {
    for (const MetricsRow& r : files[run].rows)
      if (r.step == step) return r;
    throw IoError("missing step");  // unreachable: step came from the intersection
  };

  for (const MetricsFile& f : files) {
    std::vector<std::optional<std::size_t>> hits;
    for (double t : thresholds) {
      std::optional<std::size_t> hit;
      for (const MetricsRow& r : f.rows) {
        if (r.eval_acc_moving >= t) {
          hit = r.step;
          break;
        }
      }
      hits.push_back(hit);
    }
    cmp.steps_to_threshold.push_back(std::move(hits));
  }
  const std::size_t last = cmp.steps.back();
  for (std::size_t i = 0; i < files.size(); ++i) {
    cmp.delta_moving.push_back(row_at(i, last).eval_acc_moving - row_at(0, last).eval_acc_moving);
    cmp.delta_batch.push_back(row_at(i, last).eval_acc_batch - row_at(0, last).eval_acc_batch);
  }

  std::ostringstream header;
  header << "# aligned on " << cmp.steps.size() << " steps common to all runs (rows per run:";
  for (const MetricsFile& f : files) header << ' ' << f.rows.size();
  header << ")\n";
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    header << "# run" << i << '=' << dirs[i].string() << " config_hash=" << files[i].config_hash
           << '\n';
  }

  std::ostringstream csv;
  csv << header.str() << "step";
  for (std::size_t i = 0; i < files.size(); ++i) {
    csv << ",run" << i << "_train_loss,run" << i << "_acc_moving,run" << i << "_acc_batch";
  }
  csv << '\n';
  for (std::size_t s : cmp.steps) {
    csv << s;
    for (std::size_t i = 0; i < files.size(); ++i) {
      const MetricsRow& r = row_at(i, s);
      char buf[96];
      std::snprintf(buf, sizeof buf, ",%.10g,%.6f,%.6f", r.train_loss, r.eval_acc_moving,
                    r.eval_acc_batch);
      csv << buf;
    }
    csv << '\n';
  }
  cmp.csv = csv.str();

  std::ostringstream text;
  text << header.str() << '\n';
  text << std::left << std::setw(6) << "run" << std::right << std::setw(12) << "final_step"
       << std::setw(12) << "acc_moving" << std::setw(12) << "acc_batch" << std::setw(12)
       << "d_moving" << std::setw(12) << "d_batch";
  for (double t : thresholds) {
    std::ostringstream label;
    label << "step@" << t;
    text << std::setw(12) << label.str();
  }
  text << '\n';
  for (std::size_t i = 0; i < files.size(); ++i) {
    const MetricsRow& r = row_at(i, last);
    text << std::left << std::setw(6) << ("run" + std::to_string(i)) << std::right
         << std::setw(12) << last << std::fixed << std::setprecision(4) << std::setw(12)
         << r.eval_acc_moving << std::setw(12) << r.eval_acc_batch << std::showpos
         << std::setw(12) << cmp.delta_moving[i] << std::setw(12) << cmp.delta_batch[i]
         << std::noshowpos;
    for (const auto& hit : cmp.steps_to_threshold[i]) {
      text << std::setw(12) << (hit ? std::to_string(*hit) : std::string("never"));
    }
    text << '\n';
  }
  cmp.text = text.str();
  return cmp;
}

// ---------------------------------------------------------------------------
// Variance gap of a finished run

Network load_run_network(const std::filesystem::path& run_dir, ExperimentConfig* cfg_out) {
  for (const char* name : {"config.txt", "checkpoint.bin"}) {
    if (!std::filesystem::is_regular_file(run_dir / name)) {
      throw IoError(run_dir.string() + " is not a finished run (missing " + name + ")");
    }
  }
  const ExperimentConfig cfg = load_config_file(run_dir / "config.txt");
  std::size_t in_channels = 3;
  std::size_t classes = 10;
  if (cfg.dataset == "synthetic") {
    in_channels = cfg.synth_channels;
    classes = static_cast<std::size_t>(cfg.synth_classes);
  }
  Network net =
      build_desk_network(cfg.architecture(in_channels, classes), cfg.norm_settings(), cfg.seed);
  net.load_state(load_checkpoint(run_dir / "checkpoint.bin"));
  if (cfg_out) *cfg_out = cfg;
  return net;
}

VarianceGapReport run_variance_gap(const std::filesystem::path& run_dir) {
  ExperimentConfig cfg;
  const Network net = load_run_network(run_dir, &cfg);
  const Datasets data = load_datasets(cfg);
  VarianceGapReport report = variance_gap(net, data.train, cfg.statistics_batch);
  write_variance_gap_csv(run_dir / "vargap.csv", report);
  return report;
}

}  // namespace bkn
