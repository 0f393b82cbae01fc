#include "cosod/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>

#include "cosod/imageio.hpp"
#include "cosod/rng.hpp"

namespace cosod {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("train.lr must be positive");
  if (!(beta1 > 0 && beta1 < 1)) throw ConfigError("train.beta1 must lie in (0, 1)");
  if (!(beta2 > 0 && beta2 < 1)) throw ConfigError("train.beta2 must lie in (0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be positive");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
  if (group_size < 2) throw ConfigError("train.group_size must be >= 2");
  if (aux_size < 0) throw ConfigError("train.aux_size must be >= 0");
  if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
  if (!flags.any()) throw ConfigError("every loss term is disabled; nothing to optimize");
}

template <typename Scalar>
AdamState<Scalar> AdamState<Scalar>::zeros(const ParameterSet<Scalar>& params) {
  AdamState s;
  for (const auto& [_, t] : params.entries()) {
    s.m.emplace_back(t.numel(), Scalar(0));
    s.v.emplace_back(t.numel(), Scalar(0));
  }
  return s;
}

template <typename Scalar>
void adam_step(ParameterSet<Scalar>& params, AdamState<Scalar>& state, const TrainConfig& cfg,
               const std::function<bool(const std::string&)>& exempt) {
  const auto& entries = params.entries();
  if (state.m.size() != entries.size()) throw UsageError("optimizer state does not match the parameter set");
  for (const auto& [name, t] : entries)
    if (!t.has_grad() && !(exempt && exempt(name)))
      throw UsageError("parameter received no gradient: " + name);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1 - std::pow(cfg.beta1, t);
  const double c2 = 1 - std::pow(cfg.beta2, t);
  for (std::size_t p = 0; p < entries.size(); ++p) {
    Tensor<Scalar> w = entries[p].second;
    auto data = w.mutable_data();
    const bool has = w.has_grad();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = has ? static_cast<double>(w.grad()[i]) : 0.0;
      const double mi = cfg.beta1 * m[i] + (1 - cfg.beta1) * g;
      const double vi = cfg.beta2 * v[i] + (1 - cfg.beta2) * g * g;
      m[i] = static_cast<Scalar>(mi);
      v[i] = static_cast<Scalar>(vi);
      const double update = cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_eps);
      data[i] = static_cast<Scalar>(static_cast<double>(data[i]) - update);
    }
  }
}

template <typename Scalar>
std::vector<NamedTensor> export_adam(const AdamState<Scalar>& state, const ParameterSet<Scalar>& params) {
  std::vector<NamedTensor> out;
  out.push_back({"adam.step", Tensor<float>::from_data({1}, {static_cast<float>(state.step)})});
  const auto& entries = params.entries();
  for (std::size_t p = 0; p < entries.size(); ++p) {
    const Shape& shape = entries[p].second.shape();
    std::vector<float> m(state.m[p].begin(), state.m[p].end()), v(state.v[p].begin(), state.v[p].end());
    out.push_back({"adam.m." + entries[p].first, Tensor<float>::from_data(shape, std::move(m))});
    out.push_back({"adam.v." + entries[p].first, Tensor<float>::from_data(shape, std::move(v))});
  }
  return out;
}

template <typename Scalar>
AdamState<Scalar> import_adam(const std::vector<NamedTensor>& tensors, const ParameterSet<Scalar>& params) {
  const auto& entries = params.entries();
  if (tensors.size() != 1 + 2 * entries.size() || tensors[0].name != "adam.step")
    throw ParseError("optimizer state does not match the model");
  AdamState<Scalar> s;
  s.step = static_cast<std::int64_t>(tensors[0].tensor.data()[0]);
  for (std::size_t p = 0; p < entries.size(); ++p) {
    const auto& m = tensors[1 + 2 * p];
    const auto& v = tensors[2 + 2 * p];
    if (m.name != "adam.m." + entries[p].first || v.name != "adam.v." + entries[p].first ||
        m.tensor.shape() != entries[p].second.shape() || v.tensor.shape() != entries[p].second.shape())
      throw ParseError("optimizer state entry mismatch at " + entries[p].first);
    s.m.emplace_back(m.tensor.data().begin(), m.tensor.data().end());
    s.v.emplace_back(v.tensor.data().begin(), v.tensor.data().end());
  }
  return s;
}

bool gradient_exempt(const std::string& name, const LossFlags& flags, bool contrastive_active) {
  auto starts = [&](const char* prefix) { return name.rfind(prefix, 0) == 0; };
  const bool contrastive = flags.contrastive && contrastive_active;
  if (starts("proj.")) return !contrastive;
  if (starts("head_s.")) return !flags.early;
  if (starts("tgl.") || starts("tgf.")) return !flags.cosal && !contrastive;
  if (starts("decoder.")) return !flags.cosal && !flags.aux;
  return false;
}

std::string loss_csv_header() { return "step,l_c,l_s,l_ct,l_single,l_group,total\n"; }

std::string loss_csv_row(const LossLogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.l_c, r.l_s, r.l_ct, r.l_single,
                r.l_group, r.total);
  return buf;
}

Trainer::Trainer(const ModelConfig& model_cfg, const LossConfig& loss_cfg, const TrainConfig& train_cfg,
                 const LoadedDataset<float>& data)
    : model_cfg_(model_cfg), loss_cfg_(loss_cfg), cfg_(train_cfg), data_(data), model_(model_cfg, train_cfg.seed) {
  cfg_.validate();
  loss_cfg_.validate();
  if (data_.groups.empty()) throw UsageError("training set has no groups");
  for (const auto& g : data_.groups)
    if (static_cast<int>(g.images.size()) < cfg_.group_size)
      throw ConfigError(g.group_id + " has " + std::to_string(g.images.size()) + " images, train.group_size is " +
                        std::to_string(cfg_.group_size));
  if (model_cfg_.tgl == TglMode::kConcatConv && model_cfg_.group_size != cfg_.group_size)
    throw ConfigError("concat-conv group learning needs model.group_size == train.group_size");
  adam_ = AdamState<float>::zeros(model_.params());
}

int Trainer::total_steps() const {
  const int full = cfg_.epochs * steps_per_epoch();
  return cfg_.max_steps > 0 ? std::min(full, cfg_.max_steps) : full;
}

int Trainer::group_for_step(int s) const {
  const int g = steps_per_epoch();
  const int epoch = s / g;
  std::vector<int> order(g);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(Rng::combine(Rng::combine(cfg_.seed, Rng::hash("epoch")), static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  return order[s % g];
}

std::vector<int> Trainer::aux_for_step(int s) const {
  const int pool = static_cast<int>(data_.aux.images.size());
  const int k = std::min(cfg_.aux_size, pool);
  std::vector<int> idx(pool);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(Rng::combine(Rng::combine(cfg_.seed, Rng::hash("aux")), static_cast<std::uint64_t>(s)));
  // Partial Fisher-Yates: the first k entries are a uniform sample.
  for (int i = 0; i < k; ++i) std::swap(idx[i], idx[rng.uniform_int(i, pool - 1)]);
  idx.resize(k);
  return idx;
}

LossLogRow Trainer::step() {
  const int s = steps_done();
  const auto& group = data_.groups[group_for_step(s)];
  std::vector<Tensor<float>> images = group.images, gt = group.gt;
  if (static_cast<int>(images.size()) > cfg_.group_size) {
    std::vector<int> idx(images.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(Rng::combine(Rng::combine(cfg_.seed, Rng::hash("subset")), static_cast<std::uint64_t>(s)));
    rng.shuffle(idx);
    images.clear();
    gt.clear();
    for (int i = 0; i < cfg_.group_size; ++i) {
      images.push_back(group.images[idx[i]]);
      gt.push_back(group.gt[idx[i]]);
    }
  }
  std::vector<Tensor<float>> aux_images, aux_gt;
  for (int i : aux_for_step(s)) {
    aux_images.push_back(data_.aux.images[i]);
    aux_gt.push_back(data_.aux.gt[i]);
  }

  const auto out = model_.forward(images, aux_images);
  const auto terms = group_loss_terms(out, gt, aux_gt, model_, loss_cfg_, cfg_.flags);
  const auto obj = total_loss(terms, cfg_.flags);
  const LossReport& r = obj.report;
  LossLogRow row{s + 1, r.l_c, r.l_s, r.l_ct, r.l_single, r.l_group, r.total};
  if (!std::isfinite(r.total)) {
    Tape<float>::current().clear();
    throw ComputationError("non-finite loss at step " + std::to_string(row.step) + ": " + loss_csv_header() +
                           loss_csv_row(row));
  }
  const bool differentiable = obj.total.requires_grad();
  if (differentiable) backward(obj.total);
  TrainConfig step_cfg = cfg_;
  if (cfg_.lr_schedule == LrSchedule::kCosine)
    step_cfg.lr = cfg_.lr * 0.5 * (1 + std::cos(std::numbers::pi * s / total_steps()));
  adam_step(model_.params(), adam_, step_cfg, [&](const std::string& name) {
    return !differentiable || gradient_exempt(name, cfg_.flags, terms.contrastive_active);
  });
  model_.params().clear_grads();
  return row;
}

void Trainer::save(const fs::path& model_path, const fs::path& optimizer_path) const {
  save_checkpoint(model_path, model_.params().export_tensors());
  save_checkpoint(optimizer_path, export_adam(adam_, model_.params()));
}

void Trainer::resume(const fs::path& model_path, const fs::path& optimizer_path) {
  model_.params().import_tensors(load_checkpoint(model_path));
  adam_ = import_adam(load_checkpoint(optimizer_path), model_.params());
}

std::vector<Tensor<float>> predict_group(const CoSformer<float>& model, const std::vector<Tensor<float>>& images) {
  NoGradGuard guard;
  return model.forward(images).m;
}

namespace {

Plane plane_of(const ByteImage& img) {
  Plane p(img.h, img.w);
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = img.data[i] / 255.0;
  return p;
}

Plane plane_of(const Tensor<float>& t) {
  Plane p(t.dim(0), t.dim(1));
  for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = static_cast<double>(t.data()[i]);
  return p;
}

}  // namespace

MetricsReport evaluate_model(const CoSformer<float>& model, const std::vector<ImageGroup<float>>& groups) {
  std::vector<Plane> preds, gts;
  std::vector<std::string> keys;
  for (const auto& g : groups) {
    const auto maps = predict_group(model, g.images);
    for (std::size_t i = 0; i < maps.size(); ++i) {
      preds.push_back(plane_of(quantize_map(maps[i])));
      gts.push_back(plane_of(g.gt[i]));
      keys.push_back(g.group_id + "/" + item_stem(static_cast<int>(i)));
    }
  }
  return evaluate(preds, gts, keys);
}

TrainResult train(Trainer& trainer, const TrainConfig& cfg, const TrainRun& run) {
  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  const bool files = !run.out_dir.empty();
  std::ofstream log;
  if (files) {
    fs::create_directories(run.out_dir);
    if (run.resume) {
      trainer.resume(run.out_dir / "model.ckpt", run.out_dir / "optimizer.ckpt");
      log.open(run.out_dir / "loss_log.csv", std::ios::app);
    } else {
      log.open(run.out_dir / "loss_log.csv", std::ios::trunc);
      log << loss_csv_header();
    }
    if (!log) throw IoError("cannot write " + (run.out_dir / "loss_log.csv").string());
  } else if (run.resume) {
    throw UsageError("resume needs an output directory");
  }
  auto checkpoint = [&](int step) {
    if (files) {
      log.flush();
      trainer.save(run.out_dir / "model.ckpt", run.out_dir / "optimizer.ckpt");
    }
    if (run.validation) {
      MetricsReport m = evaluate_model(trainer.model(), *run.validation);
      if (files) write_file(run.out_dir / ("metrics_step" + std::to_string(step) + ".json"), report_json(m));
      result.evaluations.emplace_back(step, std::move(m));
    }
  };
  const int total = trainer.total_steps();
  while (trainer.steps_done() < total) {
    const LossLogRow row = trainer.step();
    result.log.push_back(row);
    if (files) log << loss_csv_row(row);
    if (run.on_step) run.on_step(row);
    if (cfg.eval_every > 0 && row.step % cfg.eval_every == 0 && row.step != total) checkpoint(row.step);
  }
  checkpoint(trainer.steps_done());
  result.steps = trainer.steps_done();
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

std::vector<LadderRow> ladder_configs(const ModelConfig& base, const LossFlags& base_flags) {
  std::vector<LadderRow> rows(5);
  ModelConfig m = base;
  m.tsir = TsirMode::kConv;
  m.tgl = TglMode::kConcatConv;
  m.tgf = TgfMode::kConv;
  m.pe_in_tgl = false;
  LossFlags f = base_flags;
  f.contrastive = false;
  rows[0] = {"baseline", m, f, {}, 0};
  m.tsir = TsirMode::kTransformer;
  rows[1] = {"+TSIR", m, f, {}, 0};
  m.tgl = TglMode::kTransformer;
  rows[2] = {"+TGL", m, f, {}, 0};
  m.tgf = TgfMode::kTransformer;
  rows[3] = {"+TGF", m, f, {}, 0};
  f.contrastive = true;
  rows[4] = {"+contrastive", m, f, {}, 0};
  return rows;
}

std::vector<LadderRow> ablation_ladder(const ModelConfig& base, const LossConfig& loss_cfg,
                                       const TrainConfig& train_cfg, const LoadedDataset<float>& train_data,
                                       const std::vector<ImageGroup<float>>& validation,
                                       const std::function<void(const LadderRow&)>& on_row) {
  auto rows = ladder_configs(base, train_cfg.flags);
  for (auto& row : rows) {
    TrainConfig cfg = train_cfg;
    cfg.flags = row.flags;
    ModelConfig model_cfg = row.model;
    model_cfg.group_size = cfg.group_size;
    Trainer trainer(model_cfg, loss_cfg, cfg, train_data);
    const TrainResult r = train(trainer, cfg, TrainRun{});
    row.metrics = evaluate_model(trainer.model(), validation);
    row.seconds = r.seconds;
    if (on_row) on_row(row);
  }
  return rows;
}

std::string ladder_csv(const std::vector<LadderRow>& rows) {
  std::string out = "variant,mae,f_max,s_alpha,e_max\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f\n", r.name.c_str(), r.metrics.mae, r.metrics.f_max,
                  r.metrics.s_alpha, r.metrics.e_max);
    out += buf;
  }
  return out;
}

std::string ladder_markdown(const std::vector<LadderRow>& rows) {
  std::string out = "| Variant | MAE | F_max | S_alpha | E_max |\n|---|---|---|---|---|\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %.4f | %.4f | %.4f | %.4f |\n", r.name.c_str(), r.metrics.mae,
                  r.metrics.f_max, r.metrics.s_alpha, r.metrics.e_max);
    out += buf;
  }
  return out;
}

OrderSensitivity order_sensitivity(const CoSformer<float>& model, const std::vector<ImageGroup<float>>& groups,
                                   int n_orders, std::uint64_t seed) {
  if (n_orders < 1) throw UsageError("order sensitivity needs at least one order");
  OrderSensitivity out;
  out.n_orders = n_orders;
  std::vector<std::vector<Tensor<float>>> reference;
  for (int o = 0; o < n_orders; ++o) {
    std::vector<Plane> preds, gts;
    std::vector<std::string> keys;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const auto& g = groups[gi];
      std::vector<int> perm(g.images.size());
      std::iota(perm.begin(), perm.end(), 0);
      Rng rng(Rng::combine(Rng::combine(seed, static_cast<std::uint64_t>(o)), static_cast<std::uint64_t>(gi)));
      rng.shuffle(perm);
      std::vector<Tensor<float>> permuted;
      for (int p : perm) permuted.push_back(g.images[p]);
      const auto maps_perm = predict_group(model, permuted);
      std::vector<Tensor<float>> maps(maps_perm.size());
      for (std::size_t k = 0; k < perm.size(); ++k) maps[perm[k]] = maps_perm[k];
      if (o == 0) {
        reference.push_back(maps);
      } else {
        for (std::size_t i = 0; i < maps.size(); ++i) {
          const auto a = maps[i].data();
          const auto b = reference[gi][i].data();
          for (std::size_t j = 0; j < a.size(); ++j)
            out.max_map_diff = std::max(out.max_map_diff, std::abs(static_cast<double>(a[j]) - b[j]));
        }
      }
      for (std::size_t i = 0; i < maps.size(); ++i) {
        preds.push_back(plane_of(quantize_map(maps[i])));
        gts.push_back(plane_of(g.gt[i]));
        keys.push_back(g.group_id + "/" + item_stem(static_cast<int>(i)));
      }
    }
    out.per_order.push_back(evaluate(preds, gts, keys));
  }
  for (int k = 0; k < 4; ++k) {
    auto pick = [k](const MetricsReport& r) {
      return k == 0 ? r.mae : k == 1 ? r.f_max : k == 2 ? r.s_alpha : r.e_max;
    };
    double mean = 0;
    for (const auto& r : out.per_order) mean += pick(r);
    mean /= n_orders;
    double var = 0;
    for (const auto& r : out.per_order) var += (pick(r) - mean) * (pick(r) - mean);
    out.std_dev[k] = std::sqrt(var / n_orders);
  }
  return out;
}

std::string order_sensitivity_csv(const std::vector<std::pair<std::string, OrderSensitivity>>& rows) {
  std::string out = "variant,n_orders,std_mae,std_f_max,std_s_alpha,std_e_max,max_map_diff\n";
  char buf[256];
  for (const auto& [name, s] : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%.3e,%.3e,%.3e,%.3e,%.3e\n", name.c_str(), s.n_orders, s.std_dev[0],
                  s.std_dev[1], s.std_dev[2], s.std_dev[3], s.max_map_diff);
    out += buf;
  }
  return out;
}

#define COSOD_INSTANTIATE(S)                                                                       \
  template struct AdamState<S>;                                                                    \
  template void adam_step<S>(ParameterSet<S>&, AdamState<S>&, const TrainConfig&,                  \
                             const std::function<bool(const std::string&)>&);                      \
  template std::vector<NamedTensor> export_adam<S>(const AdamState<S>&, const ParameterSet<S>&);   \
  template AdamState<S> import_adam<S>(const std::vector<NamedTensor>&, const ParameterSet<S>&);

COSOD_INSTANTIATE(float)
COSOD_INSTANTIATE(double)

#undef COSOD_INSTANTIATE

}  // namespace cosod
