// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include "msu/runtime.hpp"

#include <png.h>
#include <sys/utsname.h>

#include <Eigen/Core>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <thread>

#include "msu/json_util.hpp"

#ifndef MSU_VERSION
#define MSU_VERSION "0.0.0"
#endif
#ifndef MSU_BUILD_TYPE
#define MSU_BUILD_TYPE "unknown"
#endif

namespace msu {

namespace fs = std::filesystem;

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  augment.validate();
  optimizer.validate();
  split_sizes(1000, split);  // ratio checks only
  if (epochs < 1 && max_steps < 1) throw ConfigError("epochs: must be >= 1 (or set max_steps)");
  if (max_steps < 0) throw ConfigError("max_steps: must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  if (dataset_root.empty()) throw ConfigError("dataset_root: must be set");
  if (output_dir.empty()) throw ConfigError("output_dir: must be set");
  if (device_threads < 0) throw ConfigError("device_threads: must be >= 0");
  if (val_every < 0) throw ConfigError("val_every: must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every: must be >= 0");
}

nlohmann::json RunConfig::to_json() const {
  return {{"model", model.to_json()},
          {"loss", loss.to_json()},
          {"augment", augment.to_json()},
          {"optimizer", optimizer.to_json()},
          {"split", {{"train", split.train}, {"val", split.val}, {"test", split.test}}},
          {"epochs", epochs},
          {"max_steps", max_steps},
          {"batch_size", batch_size},
          {"seed", seed},
          {"dataset_root", dataset_root},
          {"output_dir", output_dir},
          {"device_threads", device_threads},
          {"val_every", val_every},
          {"checkpoint_every", checkpoint_every}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  JsonReader r(j, "config");
  if (const auto* m = r.raw("model")) c.model = ModelConfig::from_json(*m);
  if (const auto* m = r.raw("loss")) c.loss = LossConfig::from_json(*m);
  if (const auto* m = r.raw("augment")) c.augment = AugmentConfig::from_json(*m);
  if (const auto* m = r.raw("optimizer")) c.optimizer = OptimizerConfig::from_json(*m);
  if (auto s = r.object("split")) {
    s->get("train", c.split.train);
    s->get("val", c.split.val);
    s->get("test", c.split.test);
    s->finish();
  }
  r.get("epochs", c.epochs);
  r.get("max_steps", c.max_steps);
  r.get("batch_size", c.batch_size);
  r.get("seed", c.seed);
  r.get("dataset_root", c.dataset_root);
  r.get("output_dir", c.output_dir);
  r.get("device_threads", c.device_threads);
  r.get("val_every", c.val_every);
  r.get("checkpoint_every", c.checkpoint_every);
  r.finish();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

int thread_budget(int fallback) {
  if (const char* v = std::getenv("MSU_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end != v && *end == '\0' && n >= 1) return static_cast<int>(std::min(n, 256L));
  }
  return std::max(1, fallback);
}

nlohmann::json environment_fingerprint() {
  utsname u{};
  uname(&u);
  return {{"msumamba_version", MSU_VERSION},
          {"build_type", MSU_BUILD_TYPE},
          {"compiler", __VERSION__},
          {"cplusplus", static_cast<long>(__cplusplus)},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"libpng", PNG_LIBPNG_VER_STRING},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"os", std::string(u.sysname) + " " + u.release},
          {"machine", u.machine},
          {"hardware_threads", std::thread::hardware_concurrency()},
          {"msu_threads", thread_budget(1)}};
}

RunLog::RunLog(const fs::path& path) : os_(path, std::ios::app) {
  if (!os_) throw ConfigError("cannot open run log '" + path.string() + "'");
}

void RunLog::append(const nlohmann::json& record) {
  os_ << record.dump() << "\n";
  os_.flush();
}

namespace {

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void restore_rng(Rng& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw CheckpointError("checkpoint rng state is malformed");
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write '" + path.string() + "'");
  os << j.dump(2) << "\n";
}

}  // namespace

Trainer::Trainer(RunConfig cfg, std::optional<fs::path> resume) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::vector<Sample> all = load_dataset(cfg_.dataset_root, cfg_.model.num_classes);
  if (all.empty()) throw DataError(cfg_.dataset_root + ": dataset is empty");
  for (const auto& s : all) {
    if (s.image.height % 32 != 0 || s.image.width % 32 != 0) {
      throw DataError(cfg_.dataset_root + "/images/" + s.id + ".png: size " + std::to_string(s.image.height) + "x" +
                      std::to_string(s.image.width) + " is not divisible by 32");
    }
    if (s.image.height != all.front().image.height || s.image.width != all.front().image.width) {
      throw DataError(cfg_.dataset_root + "/images/" + s.id + ".png: all training images must share one size");
    }
  }
  data_ = split_dataset(std::move(all), cfg_.split, cfg_.seed);
  if (data_.train.empty()) throw ConfigError("split: the training partition is empty");

  steps_per_epoch_ =
      (static_cast<std::int64_t>(data_.train.size()) + cfg_.batch_size - 1) / cfg_.batch_size;
  total_steps_ = cfg_.max_steps > 0 ? cfg_.max_steps : cfg_.epochs * steps_per_epoch_;

  if (resume) {
    LoadedCheckpoint ck = load_checkpoint(*resume);
    if (!ck.state) throw CheckpointError(resume->string() + ": checkpoint has no training state to resume from");
    if (ck.model->config().to_json() != cfg_.model.to_json()) {
      throw ConfigError("resume: the checkpoint's model config differs from the run config");
    }
    model_ = std::move(ck.model);
    opt_ = std::make_unique<Adam>(model_->named_parameters(), cfg_.optimizer);
    std::map<std::string, Tensor> tensors(ck.state->tensors.begin(), ck.state->tensors.end());
    const auto& meta = ck.state->meta;
    try {
      opt_->load_state(tensors, meta.at("step").get<std::int64_t>());
      step_ = meta.at("step").get<std::int64_t>();
      epoch_ = meta.at("epoch").get<std::int64_t>();
      cursor_ = meta.at("cursor").get<std::int64_t>();
      order_ = meta.at("order").get<std::vector<std::int64_t>>();
      best_val_dice_ = meta.at("best_val_dice").get<double>();
      restore_rng(rng_, meta.at("rng").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(resume->string() + ": malformed training state: " + e.what());
    }
  } else {
    model_ = build_model(cfg_.model);
    opt_ = std::make_unique<Adam>(model_->named_parameters(), cfg_.optimizer);
    rng_.seed(derive_seed(cfg_.seed, 0x7261696EULL));
  }

  out_ = cfg_.output_dir;
  fs::create_directories(out_);
  write_json(out_ / "config.json", cfg_.to_json());
  write_json(out_ / "env.json", environment_fingerprint());
  log_ = std::make_unique<RunLog>(out_ / "run_log.jsonl");
}

void Trainer::new_epoch_order() {
  const auto n = static_cast<std::int64_t>(data_.train.size());
  order_.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order_[static_cast<std::size_t>(i)] = i;
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(uniform01(rng_) * static_cast<double>(i + 1));
    std::swap(order_[static_cast<std::size_t>(i)], order_[static_cast<std::size_t>(j)]);
  }
  cursor_ = 0;
}

std::vector<const Sample*> Trainer::next_batch(Rng& rng, std::vector<Sample>& storage) {
  const auto end = std::min<std::int64_t>(cursor_ + cfg_.batch_size, static_cast<std::int64_t>(order_.size()));
  storage.clear();
  storage.reserve(static_cast<std::size_t>(end - cursor_));
  for (std::int64_t i = cursor_; i < end; ++i) {
    const Sample& s = data_.train[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])];
    storage.push_back(augment(s, cfg_.augment, rng));
  }
  cursor_ = end;
  std::vector<const Sample*> out;
  for (const auto& s : storage) out.push_back(&s);
  return out;
}

TrainingState Trainer::training_state() const {
  TrainingState st;
  st.meta = {{"step", step_},
             {"epoch", epoch_},
             {"cursor", cursor_},
             {"order", order_},
             {"best_val_dice", best_val_dice_},
             {"rng", rng_state(rng_)},
             {"run_config", cfg_.to_json()}};
  st.tensors = opt_->state_tensors();
  return st;
}

void Trainer::save(const fs::path& path) const {
  const TrainingState st = training_state();
  save_checkpoint(*model_, path, &st);
}

TrainResult Trainer::run(std::int64_t stop_after) {
  TrainResult result;
  const auto params = model_->parameters();
  const auto t0 = std::chrono::steady_clock::now();
  std::int64_t taken = 0;
  const int threads = cfg_.device_threads > 0 ? static_cast<int>(cfg_.device_threads) : thread_budget(1);
  const auto& select = data_.val.empty() ? data_.train : data_.val;
  const char* select_name = data_.val.empty() ? "train" : "val";

  while (step_ < total_steps_ && (stop_after < 0 || taken < stop_after)) {
    if (order_.empty() || cursor_ >= static_cast<std::int64_t>(order_.size())) new_epoch_order();
    std::vector<Sample> storage;
    const auto batch = next_batch(rng_, storage);
    const auto [x, y] = make_batch(batch, cfg_.model.dtype);

    LossTerms loss;
    std::vector<Tensor> grads;
    try {
      Context ctx{Mode::train, &rng_};
      loss = combined_loss(model_->forward(x, ctx), y, cfg_.loss);
      if (!std::isfinite(loss.total.item())) throw NumericError("loss is not finite");
      grads = gradients(loss.total, params);
    } catch (const NumericError& e) {
      nlohmann::json ids = nlohmann::json::array();
      for (const auto* s : batch) ids.push_back(s->id);
      const nlohmann::json dump = {{"step", step_ + 1}, {"epoch", epoch_}, {"batch_ids", ids}, {"error", e.what()}};
      write_json(out_ / "nan_dump.json", dump);
      log_->append({{"type", "abort"}, {"step", step_ + 1}, {"reason", e.what()}, {"batch_ids", ids}});
      throw TrainingAborted("non-finite value at step " + std::to_string(step_ + 1) + " (batch " + ids.dump() +
                            "): " + e.what() + "; diagnostic in " + (out_ / "nan_dump.json").string());
    }
    const double lr = scheduled_lr(cfg_.optimizer, step_, total_steps_);
    opt_->step(grads, lr);
    ++step_;
    ++taken;

    StepRecord rec;
    rec.step = step_;
    rec.epoch = epoch_;
    rec.loss = loss.total.item();
    rec.focal = loss.focal.item();
    rec.dice = loss.dice.item();
    rec.lr = lr;
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.steps.push_back(rec);
    log_->append({{"type", "step"},
                  {"step", rec.step},
                  {"epoch", rec.epoch},
                  {"loss", rec.loss},
                  {"focal", rec.focal},
                  {"dice", rec.dice},
                  {"lr", rec.lr},
                  {"wall_time", rec.wall_time}});
    if (step_ == 1 || step_ % 50 == 0 || step_ == total_steps_) {
      std::fprintf(stderr, "step %lld/%lld  loss %.5f  focal %.5f  dice %.5f  lr %.2e\n",
                   static_cast<long long>(step_), static_cast<long long>(total_steps_), rec.loss, rec.focal,
                   rec.dice, lr);
    }

    const bool epoch_end = cursor_ >= static_cast<std::int64_t>(order_.size());
    if (epoch_end) {
      ++epoch_;
      if (cfg_.val_every > 0 && (epoch_ % cfg_.val_every == 0 || step_ == total_steps_)) {
        MetricReport rep = evaluate(*model_, select, threads);
        log_->append({{"type", "epoch"}, {"epoch", epoch_}, {"step", step_}, {"split", select_name},
                      {"metrics", rep.to_json()}});
        const double md = rep.macro.dice.value_or(0.0);
        std::fprintf(stderr, "epoch %lld  %s mDice %.2f%%\n", static_cast<long long>(epoch_), select_name, md * 100);
        if (md > best_val_dice_) {
          best_val_dice_ = md;
          save(out_ / "best.ckpt");
        }
        result.last_val = std::move(rep);
      }
      save(out_ / "last.ckpt");
    } else if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) {
      save(out_ / "last.ckpt");
    }
  }
  if (taken > 0 || !fs::exists(out_ / "last.ckpt")) save(out_ / "last.ckpt");
  if (step_ == total_steps_ && !fs::exists(out_ / "best.ckpt")) save(out_ / "best.ckpt");
  result.best_val_dice = best_val_dice_;
  result.finished = step_ >= total_steps_;
  return result;
}

ConfusionCounts evaluate_counts(MSUMamba& model, const std::vector<Sample>& samples, int threads) {
  const auto k = model.config().num_classes;
  threads = std::max(1, std::min<int>(threads, static_cast<int>(samples.size())));
  std::vector<ConfusionCounts> shards(static_cast<std::size_t>(std::max(threads, 1)), ConfusionCounts(k));
  std::vector<std::exception_ptr> errors(shards.size());
  auto work = [&](int t) {
    try {
      NoGradGuard ng;
      DTypeScope scope(model.config().dtype);
      for (std::size_t i = static_cast<std::size_t>(t); i < samples.size(); i += static_cast<std::size_t>(threads)) {
        const Sample* s = &samples[i];
        auto [x, y] = make_batch({s}, model.config().dtype);
        Context ctx{Mode::eval, nullptr};
        confusion_accumulate(argmax_labels(model.forward(x, ctx)), y, shards[static_cast<std::size_t>(t)]);
      }
    } catch (...) {
      errors[static_cast<std::size_t>(t)] = std::current_exception();
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  ConfusionCounts total(k);
  for (const auto& s : shards) total.merge(s);
  return total;
}

MetricReport evaluate(MSUMamba& model, const std::vector<Sample>& samples, int threads) {
  const ConfusionCounts counts = evaluate_counts(model, samples, threads);
  std::vector<std::string> names;
  if (model.config().num_classes == ClassMap{}.size()) names = ClassMap{}.names;
  return compute_metrics(counts, names);
}

Mask predict_mask(MSUMamba& model, const Image& img, bool pad_to_32) {
  const std::int64_t h = img.height, w = img.width;
  const std::int64_t ph = (h + 31) / 32 * 32, pw = (w + 31) / 32 * 32;
  if ((ph != h || pw != w) && !pad_to_32) {
    throw InputError("image is " + std::to_string(h) + "x" + std::to_string(w) +
                     "; sizes must be divisible by 32 (use --pad-to-32)");
  }
  Image padded(ph, pw, 128);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) padded.at(y, x, c) = img.at(y, x, c);
    }
  }
  NoGradGuard ng;
  Context ctx{Mode::eval, nullptr};
  const LabelBatch labels = argmax_labels(model.forward(image_to_tensor(padded, model.config().dtype), ctx));
  Mask out(h, w);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) out.at(y, x) = static_cast<std::uint8_t>(labels.at(0, y, x));
  }
  return out;
}

Image render_overlay(const Image& img, const Mask& mask, double alpha) {
  Image out = img;
  const auto& pal = class_palette();
  for (std::int64_t y = 0; y < img.height; ++y) {
    for (std::int64_t x = 0; x < img.width; ++x) {
      const auto k = mask.at(y, x);
      if (k == 0 || k >= pal.size()) continue;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - alpha) * img.at(y, x, c) + alpha * pal[k][static_cast<std::size_t>(c)];
        out.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v));
      }
    }
  }
  return out;
}

}  // namespace msu
