#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cosod/config.hpp"
#include "cosod/dataset.hpp"
#include "cosod/imageio.hpp"
#include "cosod/metrics.hpp"
#include "cosod/selfcheck.hpp"
#include "cosod/synth.hpp"
#include "cosod/training.hpp"

namespace fs = std::filesystem;
using namespace cosod;

namespace {

enum Exit { kOk = 0, kUsage = 1, kIo = 2, kProperty = 3 };

struct Common {
  std::optional<std::string> config;
  std::vector<std::string> set;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value config file with [model] [loss] [train] [synth] sections");
  cmd->add_option("--set", c.set, "Override one key, e.g. --set train.lr=1e-3 (repeatable)");
}

RunConfig resolve(const Common& c, const std::optional<fs::path>& fallback = std::nullopt) {
  std::optional<fs::path> file;
  if (c.config) file = *c.config;
  else if (fallback && fs::exists(*fallback)) file = *fallback;
  return load_run_config(file, c.set, std::getenv("COSF_SEED"));
}

void echo_config(const RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  write_file(dir / "config.txt", render_config(cfg));
}

fs::path split_dir(const fs::path& root, const char* name) {
  return fs::is_directory(root / name) ? root / name : fs::path{};
}

LoadedDataset<float> load_split(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset directory not found: " + root.string());
  const DatasetIndex index = dataset_layout(root);
  for (const auto& e : index.errors) std::cerr << "dataset: " << e << "\n";
  return load_dataset<float>(index);
}

// --- synth ---------------------------------------------------------------

struct SynthArgs {
  Common common;
  std::string out;
  bool no_aux = false;
};

int run_synth(const SynthArgs& a) {
  const RunConfig cfg = resolve(a.common);
  const fs::path out(a.out);
  const SynthSummary train = write_dataset(cfg.synth, out / "train", !a.no_aux);
  const SynthSummary val = write_dataset(validation_spec(cfg.synth), out / "val", false);
  echo_config(cfg, out);
  std::printf("train: %d groups, %d images, %d aux\n", train.groups, train.images, train.aux);
  std::printf("val: %d groups, %d images\n", val.groups, val.images);
  return kOk;
}

// --- train ---------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string data, out;
  std::optional<double> lr, beta1, beta2;
  std::optional<int> epochs, max_steps, group_size, aux_size, eval_every;
  std::optional<std::uint64_t> seed;
  bool resume = false;
};

void apply_train_flags(RunConfig& cfg, const TrainArgs& a) {
  if (a.lr) cfg.train.lr = *a.lr;
  if (a.beta1) cfg.train.beta1 = *a.beta1;
  if (a.beta2) cfg.train.beta2 = *a.beta2;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.max_steps) cfg.train.max_steps = *a.max_steps;
  if (a.group_size) cfg.train.group_size = *a.group_size;
  if (a.aux_size) cfg.train.aux_size = *a.aux_size;
  if (a.eval_every) cfg.train.eval_every = *a.eval_every;
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.model.group_size = cfg.train.group_size;
  cfg.validate();
}

int run_train(const TrainArgs& a) {
  RunConfig cfg = resolve(a.common);
  apply_train_flags(cfg, a);
  const fs::path data(a.data), out(a.out);
  const fs::path train_root = split_dir(data, "train").empty() ? data : data / "train";
  const LoadedDataset<float> train_set = load_split(train_root);
  std::optional<std::vector<ImageGroup<float>>> val;
  if (const fs::path v = split_dir(data, "val"); !v.empty()) val = load_split(v).groups;
  echo_config(cfg, out);

  Trainer trainer(cfg.model, cfg.loss, cfg.train, train_set);
  TrainRun run;
  run.out_dir = out;
  run.resume = a.resume;
  run.validation = val ? &*val : nullptr;
  const int total = trainer.total_steps();
  run.on_step = [total](const LossLogRow& r) {
    if (r.step % 50 == 0 || r.step == total)
      std::printf("step %d/%d loss %.4f\n", r.step, total, r.total), std::fflush(stdout);
  };
  const TrainResult res = train(trainer, cfg.train, run);
  for (const auto& [step, m] : res.evaluations)
    std::printf("val step %d: mae %.4f f_max %.4f s %.4f e %.4f\n", step, m.mae, m.f_max, m.s_alpha, m.e_max);
  std::printf("%d steps in %.1f s, checkpoint %s\n", res.steps, res.seconds, (out / "model.ckpt").c_str());
  return kOk;
}

// --- infer ---------------------------------------------------------------

struct InferArgs {
  Common common;
  std::string checkpoint, input, out;
};

std::vector<DatasetItem> group_images(const fs::path& dir) {
  return list_images(fs::is_directory(dir / "img") ? dir / "img" : dir);
}

void infer_group(const CoSformer<float>& model, const std::vector<DatasetItem>& items, const fs::path& out,
                 const std::string& where) {
  if (items.size() < 2)
    throw UsageError(where + ": co-saliency needs a group of at least 2 related images, found " +
                     std::to_string(items.size()));
  const ModelConfig& mc = model.config();
  std::vector<Tensor<float>> inputs;
  std::vector<std::pair<int, int>> sizes;
  for (const auto& it : items) {
    const ByteImage img = read_pnm(it.image);
    if (img.channels != 3) throw ParseError(it.image.string() + ": expected an RGB (P6) image");
    sizes.emplace_back(img.h, img.w);
    Tensor<float> x = image_tensor<float>(img);
    if (img.h != mc.input_h || img.w != mc.input_w) x = upsample_bilinear(x, mc.input_h, mc.input_w);
    inputs.push_back(x);
  }
  const auto maps = predict_group(model, inputs);
  fs::create_directories(out);
  for (std::size_t i = 0; i < items.size(); ++i) {
    Tensor<float> m = maps[i];
    const auto [h, w] = sizes[i];
    if (h != mc.input_h || w != mc.input_w) {
      NoGradGuard guard;
      m = reshape(upsample_bilinear(reshape(m, {1, mc.input_h, mc.input_w}), h, w), {h, w});
    }
    write_pnm(out / (items[i].stem + ".pgm"), quantize_map(m));
  }
}

int run_infer(const InferArgs& a) {
  const fs::path ckpt(a.checkpoint), input(a.input), out(a.out);
  if (!fs::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt.string());
  RunConfig cfg = resolve(a.common, ckpt.parent_path() / "config.txt");
  cfg.model.group_size = cfg.train.group_size;
  CoSformer<float> model(cfg.model, 0);
  model.params().import_tensors(load_checkpoint(ckpt));
  if (!fs::is_directory(input)) throw IoError("input directory not found: " + input.string());

  std::vector<fs::path> groups;
  for (const auto& e : fs::directory_iterator(input))
    if (e.is_directory() && e.path().filename().string().starts_with("group_")) groups.push_back(e.path());
  std::sort(groups.begin(), groups.end());
  int written = 0;
  if (groups.empty()) {
    const auto items = group_images(input);
    infer_group(model, items, out, input.string());
    written = static_cast<int>(items.size());
  } else {
    for (const auto& g : groups) {
      const auto items = group_images(g);
      infer_group(model, items, out / g.filename(), g.string());
      written += static_cast<int>(items.size());
    }
  }
  std::printf("wrote %d maps to %s\n", written, out.c_str());
  return kOk;
}

// --- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, out;
};

int run_eval(const EvalArgs& a) {
  const MetricsReport r = evaluate_dataset(a.pred, a.gt);
  for (const auto& w : r.warning_messages) std::cerr << "warning: " << w << "\n";
  const fs::path out(a.out);
  fs::create_directories(out);
  write_file(out / "report.json", report_json(r));
  write_file(out / "pr_curve.csv", pr_csv(r));
  std::printf("%d images: mae %.4f f_max %.4f s_alpha %.4f e_max %.4f (%d warnings)\n", r.n_images, r.mae, r.f_max,
              r.s_alpha, r.e_max, r.warnings);
  return kOk;
}

// --- selfcheck -----------------------------------------------------------

struct SelfcheckArgs {
  std::string mutate = "none";
  std::uint64_t seed = 0;
  int instances = 20;
};

int run_selfcheck_cmd(const SelfcheckArgs& a) {
  SelfCheckOptions opts;
  opts.seed = a.seed;
  opts.instances = a.instances;
  if (a.mutate == "xor-to-or") opts.mask_op = MaskDifference::kOr;
  else if (a.mutate == "pe-in-tgl") opts.pe_in_tgl = true;
  bool ok = true;
  for (const auto& s : run_selfcheck(opts)) {
    std::printf("%s %s (%d cases, %d failed): %s\n", s.pass ? "PASS" : "FAIL", s.name.c_str(), s.cases, s.failures,
                s.detail.c_str());
    ok = ok && s.pass;
  }
  return ok ? kOk : kProperty;
}

// --- ablation / order ------------------------------------------------------

struct AblationArgs {
  Common common;
  std::string data, out;
  std::optional<int> max_steps;
};

int run_ablation(const AblationArgs& a) {
  RunConfig cfg = resolve(a.common);
  if (a.max_steps) cfg.train.max_steps = *a.max_steps;
  cfg.model.group_size = cfg.train.group_size;
  cfg.validate();
  const fs::path data(a.data), out(a.out);
  const LoadedDataset<float> train_set = load_split(data / "train");
  const auto val = load_split(data / "val").groups;
  echo_config(cfg, out);
  const auto rows = ablation_ladder(cfg.model, cfg.loss, cfg.train, train_set, val, [](const LadderRow& r) {
    std::printf("%-14s f_max %.4f mae %.4f (%.0f s)\n", r.name.c_str(), r.metrics.f_max, r.metrics.mae, r.seconds);
    std::fflush(stdout);
  });
  write_file(out / "ablation.csv", ladder_csv(rows));
  write_file(out / "ablation.md", ladder_markdown(rows));
  return kOk;
}

struct OrderArgs {
  Common common;
  std::string checkpoint, data, out;
  int orders = 10;
  bool pe_in_tgl = false;
};

int run_order(const OrderArgs& a) {
  const fs::path ckpt(a.checkpoint);
  if (!fs::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt.string());
  RunConfig cfg = resolve(a.common, ckpt.parent_path() / "config.txt");
  cfg.model.group_size = cfg.train.group_size;
  const auto groups = load_split(a.data).groups;
  std::vector<std::pair<std::string, OrderSensitivity>> rows;
  for (bool pe : {false, true}) {
    if (pe && !a.pe_in_tgl) continue;
    ModelConfig mc = cfg.model;
    mc.pe_in_tgl = pe;
    CoSformer<float> model(mc, 0);
    model.params().import_tensors(load_checkpoint(ckpt));
    const OrderSensitivity o = order_sensitivity(model, groups, a.orders, cfg.train.seed);
    std::printf("%s: std mae %.3g f %.3g s %.3g e %.3g, max map diff %.3g\n", pe ? "pe-in-tgl" : "standard",
                o.std_dev[0], o.std_dev[1], o.std_dev[2], o.std_dev[3], o.max_map_diff);
    rows.emplace_back(pe ? "pe_in_tgl" : "standard", o);
  }
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_file(fs::path(a.out) / "order_sensitivity.csv", order_sensitivity_csv(rows));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Co-salient object detection: synthesis, training, inference, evaluation and self-checks"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(40);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Write train/ and val/ synthetic dataset trees");
  add_common(c_synth, synth.common);
  c_synth->add_option("--out", synth.out, "Output directory")->required();
  c_synth->add_flag("--no-aux", synth.no_aux, "Skip the auxiliary single-image split");

  const TrainConfig td;
  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train on a dataset tree");
  add_common(c_train, tr.common);
  c_train->add_option("--data", tr.data, "Dataset root (uses <root>/train and <root>/val when present)")->required();
  c_train->add_option("--out", tr.out, "Run directory for checkpoints and logs")->required();
  auto str = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return std::string(buf);
  };
  c_train->add_option("--lr", tr.lr, "Adam learning rate")->default_str(str(td.lr));
  c_train->add_option("--beta1", tr.beta1, "Adam beta1")->default_str(str(td.beta1));
  c_train->add_option("--beta2", tr.beta2, "Adam beta2")->default_str(str(td.beta2));
  c_train->add_option("--epochs", tr.epochs, "Passes over the training groups")->default_str(std::to_string(td.epochs));
  c_train->add_option("--max-steps", tr.max_steps, "Step cap, 0 = epochs x groups")->default_str("0");
  c_train->add_option("--group-size", tr.group_size, "Images per co-saliency group")
      ->default_str(std::to_string(td.group_size));
  c_train->add_option("--aux-size", tr.aux_size, "Auxiliary images per step")->default_str(std::to_string(td.aux_size));
  c_train->add_option("--eval-every", tr.eval_every, "Checkpoint and validate every k steps, 0 = at the end")
      ->default_str("0");
  c_train->add_option("--seed", tr.seed, "Training seed")->default_str("0");
  c_train->add_flag("--resume", tr.resume, "Continue from model.ckpt and optimizer.ckpt in --out");

  InferArgs inf;
  auto* c_infer = app.add_subcommand("infer", "Predict co-saliency maps for a group or a dataset root");
  add_common(c_infer, inf.common);
  c_infer->add_option("--checkpoint", inf.checkpoint, "model.ckpt (config.txt beside it is used by default)")
      ->required();
  c_infer->add_option("--group", inf.input, "Group directory, or a root holding group_* directories")->required();
  c_infer->add_option("--out", inf.out, "Output directory for PGM maps")->required();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Score predicted maps against ground truth");
  c_eval->add_option("--pred", ev.pred, "Directory of predicted PGM maps")->required();
  c_eval->add_option("--gt", ev.gt, "Directory of ground-truth PGM masks")->required();
  c_eval->add_option("--out", ev.out, "Directory for report.json and pr_curve.csv")->required();

  SelfcheckArgs sc;
  auto* c_self = app.add_subcommand("selfcheck", "Run the gradient, order, mask, loss and metric suites");
  c_self->add_option("--mutate", sc.mutate, "Inject a known fault")
      ->check(CLI::IsMember({"none", "xor-to-or", "pe-in-tgl"}))
      ->capture_default_str();
  c_self->add_option("--seed", sc.seed, "Suite seed")->capture_default_str();
  c_self->add_option("--instances", sc.instances, "Random instances per gradient-checked op")->capture_default_str();

  AblationArgs ab;
  auto* c_ab = app.add_subcommand("ablation", "Train the five-stage ablation ladder and tabulate validation scores");
  add_common(c_ab, ab.common);
  c_ab->add_option("--data", ab.data, "Dataset root with train/ and val/")->required();
  c_ab->add_option("--out", ab.out, "Output directory for ablation.csv and ablation.md")->required();
  c_ab->add_option("--max-steps", ab.max_steps, "Step cap per stage");

  OrderArgs od;
  auto* c_order = app.add_subcommand("order", "Measure metric spread over random group orders");
  add_common(c_order, od.common);
  c_order->add_option("--checkpoint", od.checkpoint, "model.ckpt")->required();
  c_order->add_option("--data", od.data, "Dataset root of group_* directories")->required();
  c_order->add_option("--orders", od.orders, "Number of random orders")->capture_default_str();
  c_order->add_option("--out", od.out, "Directory for order_sensitivity.csv");
  c_order->add_flag("--pe-in-tgl", od.pe_in_tgl, "Also run with positional encodings inside the group encoder");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (c_synth->parsed()) return run_synth(synth);
    if (c_train->parsed()) return run_train(tr);
    if (c_infer->parsed()) return run_infer(inf);
    if (c_eval->parsed()) return run_eval(ev);
    if (c_self->parsed()) return run_selfcheck_cmd(sc);
    if (c_ab->parsed()) return run_ablation(ab);
    if (c_order->parsed()) return run_order(od);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
