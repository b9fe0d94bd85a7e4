#include "mpjudge/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "mpjudge/audio.hpp"
#include "mpjudge/checkpoint.hpp"
#include "mpjudge/errors.hpp"
#include "mpjudge/image.hpp"
#include "mpjudge/manifest.hpp"
#include "mpjudge/objectives.hpp"

namespace mpjudge {

namespace fs = std::filesystem;
using Item = std::pair<std::string, std::string>;  // painting id, music id

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Split split_of(const std::string& id) {
  const auto bucket = fnv1a64(id) % 10;
  return bucket < 8 ? Split::kTrain : bucket == 8 ? Split::kVal : Split::kTest;
}

std::vector<std::size_t> Corpus::pair_indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (split_of(pairs[i].pair_id) == split) out.push_back(i);
  return out;
}

std::vector<std::size_t> Corpus::preference_indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < preferences.size(); ++i)
    if (split_of(preferences[i].task_id) == split) out.push_back(i);
  return out;
}

std::vector<std::size_t> held_out_preferences(const Corpus& corpus) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < corpus.preferences.size(); ++i)
    if (split_of(corpus.preferences[i].task_id) != Split::kTrain) out.push_back(i);
  return out;
}

std::vector<float> model_mels(const audio::AudioClip& clip, const ModelConfig& config) {
  audio::MelParams params;
  params.n_mels = static_cast<int>(config.n_mels);
  const auto spec = audio::mel_spectrogram(clip, params);
  std::vector<float> out(config.n_frames * config.n_mels, static_cast<float>(std::log(params.log_floor)));
  const std::size_t rows = std::min(spec.n_frames, config.n_frames);
  std::copy_n(spec.values.begin(), rows * config.n_mels, out.begin());
  return out;
}

std::pair<std::string, std::string> preference_pair(const PreferenceRecord& task, const std::string& candidate) {
  return task.query_modality == Modality::kPainting ? Item{task.query_id, candidate} : Item{candidate, task.query_id};
}

Corpus load_corpus(const fs::path& root, const std::string& pairs_file, const std::string& preferences_file,
                   const ModelConfig& config) {
  Corpus c;
  c.config = config;
  std::map<std::string, std::string> painting_path, music_path;
  for (auto& p : manifest::load_pairs(root / pairs_file)) {
    painting_path.emplace(p.painting_id, p.painting_path);
    music_path.emplace(p.music_id, p.music_path);
    (p.score ? c.pairs : c.unscored).push_back(std::move(p));
  }
  if (!preferences_file.empty() && fs::exists(root / preferences_file)) {
    for (auto& t : manifest::load_preferences(root / preferences_file)) {
      if (!t.consensus) continue;
      for (const auto& cand : {t.candidate_a, t.candidate_b}) {
        const auto [pid, mid] = preference_pair(t, cand);
        if (!painting_path.count(pid) || !music_path.count(mid))
          throw FormatError("preference task " + t.task_id + " references media absent from the pair manifest");
      }
      c.preferences.push_back(std::move(t));
    }
  }

  std::vector<std::string> missing;
  std::size_t missing_total = 0;
  auto check = [&](const std::map<std::string, std::string>& paths) {
    for (const auto& [id, rel] : paths)
      if (!fs::exists(root / rel)) {
        ++missing_total;
        if (missing.size() < 10) missing.push_back((root / rel).string());
      }
  };
  check(painting_path);
  check(music_path);
  if (missing_total) {
    std::string msg = "missing media (" + std::to_string(missing_total) + " files):";
    for (const auto& m : missing) msg += "\n  " + m;
    throw ContractError(msg);
  }

  std::vector<std::pair<std::string, std::string>> pv(painting_path.begin(), painting_path.end());
  std::vector<std::pair<std::string, std::string>> mv(music_path.begin(), music_path.end());
  std::vector<std::vector<float>> pdata(pv.size()), mdata(mv.size());
  // per-item errors so the reported one does not depend on thread timing
  std::vector<std::string> errors(pv.size() + mv.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < pv.size() + mv.size(); ++i) {
    try {
      if (i < pv.size())
        pdata[i] = image::to_model_input(image::load_image(root / pv[i].second),
                                         static_cast<int>(config.painting.image_size));
      else
        mdata[i - pv.size()] = model_mels(audio::load_audio(root / mv[i - pv.size()].second), config);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw FormatError(e);
  for (std::size_t i = 0; i < pv.size(); ++i) c.paintings.emplace(pv[i].first, std::move(pdata[i]));
  for (std::size_t i = 0; i < mv.size(); ++i) c.music.emplace(mv[i].first, std::move(mdata[i]));
  return c;
}

namespace {

struct Batch {
  TensorF image;
  TensorF mels;
};

Batch make_batch(const Corpus& c, const std::vector<Item>& items) {
  const auto& cfg = c.config;
  const std::size_t s = cfg.painting.image_size, n = items.size();
  std::vector<float> img, mel;
  img.reserve(n * 3 * s * s);
  mel.reserve(n * cfg.n_frames * cfg.n_mels);
  for (const auto& [pid, mid] : items) {
    const auto& a = c.paintings.at(pid);
    const auto& b = c.music.at(mid);
    img.insert(img.end(), a.begin(), a.end());
    mel.insert(mel.end(), b.begin(), b.end());
  }
  return {TensorF(Shape{n, 3, s, s}, std::move(img)), TensorF(Shape{n, cfg.n_frames, cfg.n_mels}, std::move(mel))};
}

Item item_of(const PairRecord& p) { return {p.painting_id, p.music_id}; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

nlohmann::json eval_json(const metrics::EvalResult& r) { return metrics::to_json(r); }

checkpoint::Entry scalar_entry(const std::string& name, double v) {
  return {name, Shape{1}, {static_cast<float>(v)}};
}

double scalar_from(const std::vector<checkpoint::Entry>& entries, const std::string& name) {
  const auto* e = checkpoint::find(entries, name);
  if (!e || e->values.size() != 1) throw CheckpointError("checkpoint lacks trainer state '" + name + "'");
  return e->values[0];
}

void set_trainable(MPJudgeModel<float>& m, bool flag) {
  for (auto& p : m.parameters()) p.tensor.set_requires_grad(flag);
}

}  // namespace

std::vector<double> predict(MPJudgeModel<float>& model, const Corpus& corpus, const std::vector<Item>& items) {
  constexpr std::size_t kChunk = 64;
  std::vector<double> out;
  out.reserve(items.size());
  for (std::size_t b = 0; b < items.size(); b += kChunk) {
    const std::vector<Item> part(items.begin() + b, items.begin() + std::min(items.size(), b + kChunk));
    const auto batch = make_batch(corpus, part);
    const auto s = model.forward(batch.image, batch.mels, ops::Mode::kEval);
    for (std::size_t k = 0; k < part.size(); ++k) out.push_back(s[k]);
  }
  return out;
}

metrics::EvalResult evaluate_pairs(MPJudgeModel<float>& model, const Corpus& corpus,
                                   const std::vector<std::size_t>& indices, double tau,
                                   std::vector<double>* predictions) {
  std::vector<Item> items;
  std::vector<double> target;
  for (auto i : indices) items.push_back(item_of(corpus.pairs[i])), target.push_back(*corpus.pairs[i].score);
  auto pred = predict(model, corpus, items);
  auto r = metrics::evaluate(pred, target, tau);
  if (predictions) *predictions = std::move(pred);
  return r;
}

PreferenceAccuracy preference_accuracy(MPJudgeModel<float>& model, const Corpus& corpus,
                                       const std::vector<std::size_t>& indices) {
  std::vector<Item> items;
  for (auto i : indices) {
    const auto& t = corpus.preferences[i];
    items.push_back(preference_pair(t, t.preferred()));
    items.push_back(preference_pair(t, t.rejected()));
  }
  const auto s = predict(model, corpus, items);
  std::size_t wins = 0;
  for (std::size_t k = 0; k < indices.size(); ++k) wins += s[2 * k] > s[2 * k + 1];
  return {indices.empty() ? 0.0 : static_cast<double>(wins) / static_cast<double>(indices.size()), indices.size()};
}

MPJudgeModel<float> load_model(const fs::path& path) {
  const auto entries = checkpoint::load(path);
  MPJudgeModel<float> m(checkpoint::config_from(entries), 0);
  checkpoint::apply_entries(entries, m);
  return m;
}

TrainResult train(const TrainConfig& config, const Corpus& corpus, const LogSink& log, bool resume) {
  config.validate();
  const ModelConfig mc = config.model_config();
  if (!(mc == corpus.config)) throw ContractError("corpus was decoded for a different model configuration");
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out(config.out);
  fs::create_directories(out);
  manifest::write_text(out / "config.ini", to_ini(config));

  const auto train_pairs = corpus.pair_indices(Split::kTrain);
  const auto val_pairs = corpus.pair_indices(Split::kVal);
  const auto test_pairs = corpus.pair_indices(Split::kTest);
  const auto train_prefs = corpus.preference_indices(Split::kTrain);
  const auto held_prefs = held_out_preferences(corpus);
  if (train_pairs.size() < config.batch_size) throw ContractError("training split is smaller than one batch");
  if (val_pairs.size() < 2) throw ContractError("validation split needs at least two pairs");

  MPJudgeModel<float> model(mc, config.seed);
  set_trainable(model, true);
  AdamW opt(model.parameters(), config.adam_config());
  std::optional<MPJudgeModel<float>> ref;

  TrainResult result;
  std::size_t start_epoch = 0, bad_epochs = 0;
  double best = -2.0, elapsed_before = 0.0;

  const fs::path last = out / "last.mpj";
  if (resume && fs::exists(last)) {
    const auto entries = checkpoint::load(last);
    checkpoint::apply_entries(entries, model);
    opt.load_state(entries);
    start_epoch = static_cast<std::size_t>(scalar_from(entries, "train.epoch"));
    best = scalar_from(entries, "train.best_srcc");
    result.best_epoch = static_cast<std::size_t>(scalar_from(entries, "train.best_epoch"));
    bad_epochs = static_cast<std::size_t>(scalar_from(entries, "train.bad_epochs"));
    elapsed_before = scalar_from(entries, "train.seconds");
    if (checkpoint::find(entries, "ref.head.bias")) {
      ref.emplace(mc, config.seed);
      checkpoint::apply_entries(entries, *ref, "ref.");
      set_trainable(*ref, false);
    }
    log({{"event", "resume"}, {"epoch", start_epoch}});
  } else {
    log({{"event", "start"}, {"train_pairs", train_pairs.size()}, {"val_pairs", val_pairs.size()},
         {"test_pairs", test_pairs.size()}, {"train_preferences", train_prefs.size()},
         {"held_out_preferences", held_prefs.size()}});
  }

  const bool use_dpo = config.lambda_dpo > 0 && !train_prefs.empty() && config.mix_ratio > 0;
  const auto weights = config.loss_weights();
  std::size_t pref_cursor = 0;
  std::vector<std::size_t> pref_order = train_prefs;

  auto elapsed = [&] { return elapsed_before + seconds_since(t0); };
  auto save_state = [&](std::size_t epochs_done) {
    auto entries = checkpoint::model_entries(model);
    for (auto& e : opt.state_entries()) entries.push_back(std::move(e));
    if (ref)
      for (auto& e : checkpoint::model_entries(*ref, "ref.")) entries.push_back(std::move(e));
    entries.push_back(scalar_entry("train.epoch", static_cast<double>(epochs_done)));
    entries.push_back(scalar_entry("train.best_srcc", best));
    entries.push_back(scalar_entry("train.best_epoch", static_cast<double>(result.best_epoch)));
    entries.push_back(scalar_entry("train.bad_epochs", static_cast<double>(bad_epochs)));
    entries.push_back(scalar_entry("train.seconds", elapsed()));
    checkpoint::save(last, entries);
  };

  std::size_t epoch = start_epoch;
  for (; epoch < config.max_epochs; ++epoch) {
    const bool phase2 = epoch >= config.warmup_epochs;
    if (phase2 && !ref) {
      ref.emplace(model.clone());
      set_trainable(*ref, false);
      checkpoint::save(out / "reference.mpj", checkpoint::model_entries(*ref));
      log({{"event", "reference"}, {"epoch", epoch}});
    }
    std::mt19937_64 rng(config.seed ^ (0x9e3779b97f4a7c15ULL * (epoch + 1)));
    std::vector<std::size_t> order = train_pairs;
    std::shuffle(order.begin(), order.end(), rng);
    if (phase2 && use_dpo) {
      pref_order = train_prefs;
      std::shuffle(pref_order.begin(), pref_order.end(), rng);
      pref_cursor = 0;
    }

    double reg_sum = 0.0, dpo_sum = 0.0, credit = 0.0;
    std::size_t reg_steps = 0, dpo_steps = 0;
    auto apply = [&](const TensorF& loss, Tape<float>& tape, const char* kind) {
      const double v = loss.item();
      if (!std::isfinite(v))
        throw NumericError(std::string("non-finite ") + kind + " loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(opt.steps() + 1));
      backward(loss, tape);
      opt.step();
      log({{"event", "step"}, {"epoch", epoch}, {"step", opt.steps()}, {"kind", kind}, {"loss", v}});
      return v;
    };

    for (std::size_t b = 0; b + config.batch_size <= order.size(); b += config.batch_size) {
      std::vector<Item> items;
      std::vector<float> target;
      for (std::size_t k = b; k < b + config.batch_size; ++k) {
        items.push_back(item_of(corpus.pairs[order[k]]));
        target.push_back(static_cast<float>(*corpus.pairs[order[k]].score));
      }
      const auto batch = make_batch(corpus, items);
      opt.zero_grad();
      Tape<float> tape;
      TensorF loss;
      {
        TapeScope<float> scope(tape);
        const auto reg = regression_loss(model.forward(batch.image, batch.mels, ops::Mode::kTrain),
                                         TensorF(Shape{items.size()}, std::move(target)));
        loss = total_loss(reg, TensorF(), weights);
      }
      reg_sum += apply(loss, tape, "scalar");
      ++reg_steps;

      if (!(phase2 && use_dpo)) continue;
      credit += config.mix_ratio;
      while (credit >= 1.0) {
        credit -= 1.0;
        const std::size_t n = std::min(config.batch_size, pref_order.size());
        std::vector<Item> both(2 * n);
        for (std::size_t k = 0; k < n; ++k) {
          const auto& t = corpus.preferences[pref_order[pref_cursor]];
          pref_cursor = (pref_cursor + 1) % pref_order.size();
          both[k] = preference_pair(t, t.preferred());
          both[n + k] = preference_pair(t, t.rejected());
        }
        const auto pb = make_batch(corpus, both);
        const auto ref_scores = ref->forward(pb.image, pb.mels, ops::Mode::kEval);
        const auto ref_pos = ops::slice_rows(ref_scores, 0, n), ref_neg = ops::slice_rows(ref_scores, n, 2 * n);
        opt.zero_grad();
        Tape<float> ptape;
        TensorF ploss;
        {
          TapeScope<float> scope(ptape);
          const auto s = model.forward(pb.image, pb.mels, ops::Mode::kTrain);
          const auto dpo =
              dpo_loss(ops::slice_rows(s, 0, n), ops::slice_rows(s, n, 2 * n), ref_pos, ref_neg, config.beta_dpo);
          ploss = total_loss(TensorF(), dpo, weights);
        }
        dpo_sum += apply(ploss, ptape, "preference");
        ++dpo_steps;
      }
    }

    const auto val = evaluate_pairs(model, corpus, val_pairs, config.tau);
    nlohmann::json entry{{"event", "epoch"},
                         {"epoch", epoch},
                         {"phase", phase2 ? 2 : 1},
                         {"reg_loss", reg_steps ? reg_sum / static_cast<double>(reg_steps) : 0.0},
                         {"val", eval_json(val)},
                         {"seconds", elapsed()}};
    if (dpo_steps) entry["dpo_loss"] = dpo_sum / static_cast<double>(dpo_steps);
    log(entry);

    // compare at checkpoint precision so a resumed run decides identically
    const double score = static_cast<float>(val.srcc);
    if (score > best) {
      best = score;
      result.best_epoch = epoch;
      bad_epochs = 0;
      checkpoint::save(out / "best.mpj", checkpoint::model_entries(model));
    } else if (phase2) {
      ++bad_epochs;
    }
    save_state(epoch + 1);
    if (phase2 && bad_epochs >= config.patience) {
      result.stopped_early = true;
      ++epoch;
      break;
    }
    if (config.max_minutes > 0 && elapsed() >= 60.0 * config.max_minutes) {
      result.out_of_time = true;
      ++epoch;
      break;
    }
  }

  result.epochs_run = epoch;
  result.best_val_srcc = best;
  checkpoint::save(out / "final.mpj", checkpoint::model_entries(model));
  if (test_pairs.size() >= 2) {
    result.test = evaluate_pairs(model, corpus, test_pairs, config.tau);
    auto best_model = load_model(out / "best.mpj");
    result.best_test = evaluate_pairs(best_model, corpus, test_pairs, config.tau);
  }
  if (ref && !held_prefs.empty()) {
    result.reference_preference = preference_accuracy(*ref, corpus, held_prefs);
    result.final_preference = preference_accuracy(model, corpus, held_prefs);
  }
  result.seconds = elapsed();
  nlohmann::json done{{"event", "done"},
                      {"epochs", result.epochs_run},
                      {"best_epoch", result.best_epoch},
                      {"best_val_srcc", result.best_val_srcc},
                      {"stopped_early", result.stopped_early},
                      {"out_of_time", result.out_of_time},
                      {"seconds", result.seconds}};
  if (test_pairs.size() >= 2) done["test"] = eval_json(result.test), done["best_test"] = eval_json(result.best_test);
  if (result.final_preference) {
    done["reference_preference_accuracy"] = result.reference_preference->accuracy;
    done["final_preference_accuracy"] = result.final_preference->accuracy;
    done["held_out_tasks"] = result.final_preference->tasks;
  }
  log(done);
  return result;
}

}  // namespace mpjudge
