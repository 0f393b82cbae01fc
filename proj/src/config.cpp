#include "cosod/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>

#include "cosod/imageio.hpp"

namespace cosod {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& name, const std::string& value, const char* expected) {
  throw ConfigError(name + ": cannot parse '" + value + "' as " + expected);
}

long long parse_int(const std::string& name, const std::string& v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(name, v, "an integer");
  return out;
}

std::uint64_t parse_u64(const std::string& name, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(name, v, "an unsigned integer");
  return out;
}

double parse_double(const std::string& name, const std::string& v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(name, v, "a number");
  return out;
}

bool parse_bool(const std::string& name, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  bad_value(name, v, "a boolean");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Entry {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string& name, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define INT_FIELD(sec, field, member, help)                                                                   \
  Entry {                                                                                                     \
    {sec, #field, help}, [](RunConfig& c, const std::string& n, const std::string& v) {                       \
      c.member = static_cast<int>(parse_int(n, v));                                                           \
    },                                                                                                        \
        [](const RunConfig& c) { return std::to_string(c.member); }                                           \
  }
#define REAL_FIELD(sec, field, member, help)                                                                  \
  Entry {                                                                                                     \
    {sec, #field, help}, [](RunConfig& c, const std::string& n, const std::string& v) { c.member = parse_double(n, v); }, \
        [](const RunConfig& c) { return fmt(c.member); }                                                      \
  }
#define BOOL_FIELD(sec, field, member, help)                                                                  \
  Entry {                                                                                                     \
    {sec, #field, help}, [](RunConfig& c, const std::string& n, const std::string& v) { c.member = parse_bool(n, v); }, \
        [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }                           \
  }
#define SEED_FIELD(sec, member, help)                                                                         \
  Entry {                                                                                                     \
    {sec, "seed", help}, [](RunConfig& c, const std::string& n, const std::string& v) { c.member = parse_u64(n, v); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }                                           \
  }

template <typename E>
Entry enum_field(const char* sec, const char* field, E ModelConfig::*member, std::vector<std::pair<std::string, E>> names,
                 const char* help) {
  return Entry{{sec, field, help},
               [member, names](RunConfig& c, const std::string& n, const std::string& v) {
                 for (const auto& [s, e] : names)
                   if (s == v) {
                     c.model.*member = e;
                     return;
                   }
                 std::string opts;
                 for (const auto& [s, _] : names) opts += (opts.empty() ? "" : "|") + s;
                 throw ConfigError(n + ": expected one of " + opts + ", got '" + v + "'");
               },
               [member, names](const RunConfig& c) {
                 for (const auto& [s, e] : names)
                   if (c.model.*member == e) return s;
                 return std::string("?");
               }};
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t{
        INT_FIELD("model", d, model.d, "token width"),
        Entry{{"model", "stage_channels", "channel widths of F3,F4,F5,F6"},
              [](RunConfig& c, const std::string& n, const std::string& v) {
                std::stringstream ss(v);
                std::string part;
                std::vector<int> vals;
                while (std::getline(ss, part, ',')) vals.push_back(static_cast<int>(parse_int(n, trim(part))));
                if (vals.size() != 4) throw ConfigError(n + ": expected four comma-separated widths");
                for (int i = 0; i < 4; ++i) c.model.stage_channels[i] = vals[i];
              },
              [](const RunConfig& c) {
                const auto& s = c.model.stage_channels;
                return std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]) + "," +
                       std::to_string(s[3]);
              }},
        INT_FIELD("model", heads, model.heads, "attention heads"),
        INT_FIELD("model", layers_tsir, model.layers_tsir, "single-image encoder layers"),
        INT_FIELD("model", layers_tgl, model.layers_tgl, "group encoder layers"),
        INT_FIELD("model", layers_tgf, model.layers_tgf, "group fusion layers"),
        INT_FIELD("model", ffn_multiplier, model.ffn_multiplier, "feed-forward width / d"),
        INT_FIELD("model", input_h, model.input_h, "input height (multiple of 32)"),
        INT_FIELD("model", input_w, model.input_w, "input width (multiple of 32)"),
        INT_FIELD("model", stride_divisor, model.stride_divisor, "1: pyramid strides 4..32, 2: strides 2..16"),
        INT_FIELD("model", proj_dim, model.proj_dim, "contrastive embedding width"),
        enum_field<TsirMode>("model", "tsir", &ModelConfig::tsir,
                             {{"transformer", TsirMode::kTransformer}, {"conv", TsirMode::kConv}},
                             "single-image encoder: transformer|conv"),
        enum_field<TglMode>("model", "tgl", &ModelConfig::tgl,
                            {{"transformer", TglMode::kTransformer}, {"concat_conv", TglMode::kConcatConv}},
                            "group encoder: transformer|concat_conv"),
        enum_field<TgfMode>("model", "tgf", &ModelConfig::tgf,
                            {{"transformer", TgfMode::kTransformer}, {"conv", TgfMode::kConv}},
                            "group fusion: transformer|conv"),
        BOOL_FIELD("model", pe_in_tgl, model.pe_in_tgl, "debug: positional encodings inside the group encoder"),
        INT_FIELD("loss", ssim_window, loss.ssim_window, "SSIM window (odd)"),
        REAL_FIELD("loss", ssim_c1, loss.ssim_c1, "SSIM C1"),
        REAL_FIELD("loss", ssim_c2, loss.ssim_c2, "SSIM C2"),
        REAL_FIELD("loss", beta_sq, loss.beta_sq, "F-measure beta squared"),
        REAL_FIELD("loss", epsilon, loss.epsilon, "division guard"),
        REAL_FIELD("loss", tau, loss.tau, "contrastive temperature"),
        REAL_FIELD("loss", binarize_threshold, loss.binarize_threshold, "mask threshold"),
        BOOL_FIELD("loss", paper_exact_denominator, loss.paper_exact_denominator,
                   "contrastive denominators without the positive term"),
        REAL_FIELD("train", lr, train.lr, "Adam learning rate"),
        Entry{{"train", "lr_schedule", "constant|cosine (anneal to 0 over the run)"},
              [](RunConfig& c, const std::string& n, const std::string& v) {
                if (v == "constant") c.train.lr_schedule = LrSchedule::kConstant;
                else if (v == "cosine") c.train.lr_schedule = LrSchedule::kCosine;
                else throw ConfigError(n + ": expected one of constant|cosine, got '" + v + "'");
              },
              [](const RunConfig& c) {
                return std::string(c.train.lr_schedule == LrSchedule::kCosine ? "cosine" : "constant");
              }},
        REAL_FIELD("train", beta1, train.beta1, "Adam beta1"),
        REAL_FIELD("train", beta2, train.beta2, "Adam beta2"),
        REAL_FIELD("train", adam_eps, train.adam_eps, "Adam epsilon"),
        INT_FIELD("train", epochs, train.epochs, "passes over the training groups"),
        INT_FIELD("train", max_steps, train.max_steps, "step cap, 0 = none"),
        INT_FIELD("train", group_size, train.group_size, "images per group per step"),
        INT_FIELD("train", aux_size, train.aux_size, "auxiliary images per step"),
        SEED_FIELD("train", train.seed, "initialization and sampling seed"),
        INT_FIELD("train", eval_every, train.eval_every, "checkpoint/eval interval in steps, 0 = end only"),
        BOOL_FIELD("train", loss_cosal, train.flags.cosal, "co-saliency loss on M"),
        BOOL_FIELD("train", loss_aux, train.flags.aux, "auxiliary saliency loss on H"),
        BOOL_FIELD("train", loss_early, train.flags.early, "early-head loss on M_S"),
        BOOL_FIELD("train", loss_contrastive, train.flags.contrastive, "contrastive losses"),
        SEED_FIELD("synth", synth.seed, "dataset seed"),
        INT_FIELD("synth", n_groups, synth.n_groups, "training groups"),
        INT_FIELD("synth", n_val_groups, synth.n_val_groups, "held-out groups"),
        INT_FIELD("synth", n_aux, synth.n_aux, "auxiliary single-object images"),
        INT_FIELD("synth", group_size, synth.group_size, "images per group"),
        INT_FIELD("synth", image_h, synth.image_h, "image height"),
        INT_FIELD("synth", image_w, synth.image_w, "image width"),
        INT_FIELD("synth", n_shape_classes, synth.n_shape_classes, "number of shape classes"),
        INT_FIELD("synth", distractors_min, synth.distractors_min, "fewest distractors per image"),
        INT_FIELD("synth", distractors_max, synth.distractors_max, "most distractors per image"),
        REAL_FIELD("synth", noise_level, synth.noise_level, "background noise amplitude"),
    };
    return t;
  }();
  return table;
}

#undef INT_FIELD
#undef REAL_FIELD
#undef BOOL_FIELD
#undef SEED_FIELD

const Entry& find_entry(const std::string& section, const std::string& key) {
  for (const auto& e : entries())
    if (e.key.section == section && e.key.key == key) return e;
  throw ConfigError("unknown config key: " + section + "." + key);
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  train.validate();
  synth.validate();
}

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& e : entries()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

void apply_setting(RunConfig& cfg, const std::string& section, const std::string& key, const std::string& value) {
  find_entry(section, key).set(cfg, section + "." + key, value);
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  const std::string lhs = trim(assignment.substr(0, eq));
  const auto dot = lhs.find('.');
  if (eq == std::string_view::npos || dot == std::string::npos)
    throw ConfigError("override must look like section.key=value, got '" + std::string(assignment) + "'");
  apply_setting(cfg, lhs.substr(0, dot), lhs.substr(dot + 1), trim(assignment.substr(eq + 1)));
}

void apply_config_text(RunConfig& cfg, std::string_view text, const std::string& source) {
  std::string section;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find('\n', start), text.size());
    std::string line = trim(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = trim(line.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "loss" && section != "train" && section != "synth")
        throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside of a section");
    try {
      apply_setting(cfg, section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

std::string get_setting(const RunConfig& cfg, const std::string& section, const std::string& key) {
  return find_entry(section, key).get(cfg);
}

std::string render_config(const RunConfig& cfg) {
  std::string out, section;
  for (const auto& e : entries()) {
    if (e.key.section != section) {
      section = e.key.section;
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += e.key.key + " = " + e.get(cfg) + "\n";
  }
  return out;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides,
                          const char* env_seed) {
  RunConfig cfg;
  if (env_seed && *env_seed) {
    const std::uint64_t seed = parse_u64("COSF_SEED", trim(env_seed));
    cfg.train.seed = seed;
    cfg.synth.seed = seed;
  }
  if (file) apply_config_text(cfg, read_file(*file), file->string());
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

}  // namespace cosod
