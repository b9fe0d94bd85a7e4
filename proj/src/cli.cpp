#include "mpjudge/cli.hpp"

#include <atomic>
#include <csignal>
#include <cstdio>
#include <fstream>

#include "CLI11.hpp"
#include "httplib.h"
#include "mpjudge/errors.hpp"
#include "mpjudge/image.hpp"
#include "mpjudge/manifest.hpp"
#include "mpjudge/service.hpp"
#include "mpjudge/synth.hpp"
#include "mpjudge/trainer.hpp"

namespace mpjudge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

int do_train(const TrainConfig& config, bool resume, std::ostream& out) {
  config.validate();
  const auto corpus = load_corpus(config.data_root, config.pairs, config.preferences, config.model_config());
  fs::create_directories(config.out);
  std::ofstream log(fs::path(config.out) / "log.jsonl", resume ? std::ios::app : std::ios::trunc);
  // every event goes to the log file; steps are too chatty for the console
  const auto result = train(
      config, corpus,
      [&](const json& e) {
        const auto line = e.dump();
        log << line << '\n';
        if (e["event"] != "step") out << line << std::endl;
      },
      resume);
  out << "test (final):\n" << metrics::to_table(result.test) << "test (best):\n" << metrics::to_table(result.best_test);
  if (result.final_preference)
    out << "held-out preference accuracy: reference " << fixed4(result.reference_preference->accuracy) << ", final "
        << fixed4(result.final_preference->accuracy) << " over " << result.final_preference->tasks << " tasks\n";
  return 0;
}

struct EvalOptions {
  std::string checkpoint;
  std::string data_root = ".";
  std::string pairs = "pairs.jsonl";
  std::string preferences = "preferences.jsonl";
  std::string split = "all";
  std::string scores_out;
  double tau = 0.5;
};

int do_eval(const EvalOptions& o, std::ostream& out) {
  auto model = load_model(o.checkpoint);
  const auto corpus = load_corpus(o.data_root, o.pairs, o.preferences, model.config());
  std::vector<std::size_t> indices;
  if (o.split == "all") {
    for (std::size_t i = 0; i < corpus.pairs.size(); ++i) indices.push_back(i);
  } else {
    const Split s = o.split == "train" ? Split::kTrain : o.split == "val" ? Split::kVal : Split::kTest;
    indices = corpus.pair_indices(s);
  }
  json report;
  if (indices.size() >= 2) {
    const auto r = evaluate_pairs(model, corpus, indices, o.tau);
    report = metrics::to_json(r);
    out << report.dump() << "\n" << metrics::to_table(r);
  } else {
    out << "fewer than two scored pairs in split '" << o.split << "'; no metrics\n";
  }
  if (!corpus.preferences.empty()) {
    std::vector<std::size_t> all(corpus.preferences.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const auto acc = preference_accuracy(model, corpus, all);
    out << "preference accuracy " << fixed4(acc.accuracy) << " over " << acc.tasks << " tasks\n";
  }
  if (!o.scores_out.empty()) {
    // every pair in the manifest, labelled or not, for the annotation queue
    std::vector<std::pair<std::string, std::string>> items;
    std::vector<std::string> ids;
    for (const auto* set : {&corpus.pairs, &corpus.unscored})
      for (const auto& p : *set) {
        items.emplace_back(p.painting_id, p.music_id);
        ids.push_back(p.pair_id);
      }
    const auto scores = predict(model, corpus, items);
    std::map<std::string, double> by_id;
    for (std::size_t i = 0; i < ids.size(); ++i) by_id[ids[i]] = scores[i];
    manifest::write_text(o.scores_out, service::model_scores_to_jsonl(by_id));
  }
  return 0;
}

struct ScoreOptions {
  std::string checkpoint;
  std::string image;
  std::string audio;
  std::string mim_dir;
};

// Nearest-neighbour upscale of a grid to a viewable heatmap, min-max
// normalized; a flat grid renders black.
image::Image heatmap(const std::vector<double>& grid, std::size_t side) {
  const std::size_t scale = std::max<std::size_t>(1, 128 / side);
  const auto [lo, hi] = std::minmax_element(grid.begin(), grid.end());
  const double range = *hi - *lo;
  const int n = static_cast<int>(side * scale);
  image::Image img{n, n, 1, std::vector<float>(static_cast<std::size_t>(n) * n)};
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double v = grid[(y / scale) * side + x / scale];
      img.at(y, x, 0) = range > 0 ? static_cast<float>((v - *lo) / range) : 0.0f;
    }
  return img;
}

int do_score(const ScoreOptions& o, std::ostream& out) {
  auto model = load_model(o.checkpoint);
  const auto& cfg = model.config();
  const std::size_t s = cfg.painting.image_size;
  auto pixels = image::to_model_input(image::load_image(o.image), static_cast<int>(s));
  auto mels = model_mels(audio::load_audio(o.audio), cfg);
  const TensorF img(Shape{1, 3, s, s}, std::move(pixels));
  const TensorF mel(Shape{1, cfg.n_frames, cfg.n_mels}, std::move(mels));
  const double score = model.predict_score(img, mel);
  out << fixed4(score) << "\n";
  if (o.mim_dir.empty()) return 0;

  MimTrace<float> trace;
  model.forward(img, mel, ops::Mode::kEval, &trace);
  const std::size_t side = s / cfg.painting.patch_size;
  const auto mim = modulation_intensity_map(trace, side);
  fs::create_directories(o.mim_dir);
  json doc{{"score", score}, {"grid_side", side}, {"layers", json::array()}};
  for (std::size_t l = 0; l < mim.per_layer.size(); ++l) {
    json grid = json::array();
    for (std::size_t r = 0; r < side; ++r)
      grid.push_back(std::vector<double>(mim.per_layer[l].begin() + static_cast<std::ptrdiff_t>(r * side),
                                         mim.per_layer[l].begin() + static_cast<std::ptrdiff_t>((r + 1) * side)));
    doc["layers"].push_back({{"layer", l}, {"mean", mim.per_layer_scalar[l]}, {"grid", grid}});
    image::save_png(fs::path(o.mim_dir) / ("mim_layer_" + std::to_string(l) + ".png"), heatmap(mim.per_layer[l], side));
  }
  manifest::write_text(fs::path(o.mim_dir) / "mim.json", doc.dump(2) + "\n");
  return 0;
}

struct ServeOptions {
  std::string data_root = ".";
  std::string pairs = "pairs.jsonl";
  std::string log = "events.jsonl";
  std::string tokens = "tokens.json";
  std::string scores;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t votes = 3;
  std::uint64_t seed = 1;
};

std::atomic<httplib::Server*> g_server{nullptr};

extern "C" void stop_server(int) {
  if (auto* s = g_server.load()) s->stop();
}

int do_serve(const ServeOptions& o, std::ostream& out) {
  service::ServiceConfig c;
  c.data_root = o.data_root;
  c.pairs_manifest = o.pairs;
  c.log_path = o.log;
  c.scores_path = o.scores;
  c.tokens = service::load_tokens(o.tokens);
  c.votes_per_task = o.votes;
  c.seed = o.seed;
  service::AnnotationService svc(c);
  httplib::Server server;
  svc.register_routes(server);
  if (!server.bind_to_port(o.host, o.port)) throw ContractError("cannot bind " + o.host + ":" + std::to_string(o.port));
  out << json{{"event", "listening"}, {"host", o.host}, {"port", o.port}}.dump() << std::endl;
  g_server = &server;
  std::signal(SIGINT, stop_server);
  std::signal(SIGTERM, stop_server);
  server.listen_after_bind();
  g_server = nullptr;
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app("Music-painting coherence judge", "mpjudge");
  app.require_subcommand(1);

  // The config file seeds the defaults before parsing so that explicit
  // flags override it.
  TrainConfig train_config;
  std::string config_path;
  if (argc > 1 && std::string(argv[1]) == "train")
    for (int i = 2; i < argc; ++i) {
      const std::string a = argv[i];
      if (a == "--config" && i + 1 < argc) config_path = argv[i + 1];
      if (a.rfind("--config=", 0) == 0) config_path = a.substr(9);
    }
  if (!config_path.empty()) {
    try {
      train_config = parse_train_ini(manifest::read_text(config_path));
    } catch (const Error& e) {
      err << "error: " << e.what() << "\n";
      return 2;
    }
  }
  bool resume = false;
  auto* train_cmd = app.add_subcommand("train", "Train with the regression warmup then mixed preference schedule");
  train_cmd->add_option("--config", config_path, "Key = value config file; flags override it");
  bind_train_options(*train_cmd, train_config);
  train_cmd->add_flag("--resume", resume, "Continue from <out>/last.mpj when it exists");

  EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Score a manifest and report SRCC/PLCC/MAE/ACC");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--data-root", eval.data_root, "Dataset directory")->capture_default_str();
  eval_cmd->add_option("--pairs", eval.pairs, "Pair manifest, relative to the data root")->capture_default_str();
  eval_cmd->add_option("--preferences", eval.preferences, "Preference manifest, relative to the data root")
      ->capture_default_str();
  eval_cmd->add_option("--split", eval.split, "all, train, val or test")
      ->check(CLI::IsMember({"all", "train", "val", "test"}))
      ->capture_default_str();
  eval_cmd->add_option("--tau", eval.tau, "Accuracy threshold")->capture_default_str();
  eval_cmd->add_option("--scores-out", eval.scores_out, "Write per-pair model scores for the annotation service");

  ScoreOptions score;
  auto* score_cmd = app.add_subcommand("score", "Score one painting/music pair");
  score_cmd->add_option("--checkpoint", score.checkpoint, "Model checkpoint")->required();
  score_cmd->add_option("--image", score.image, "Painting (PNG, PPM or PGM)")->required();
  score_cmd->add_option("--audio", score.audio, "Music clip (WAV)")->required();
  score_cmd->add_option("--mim", score.mim_dir, "Write modulation intensity maps (JSON and PNG) here");

  synth::SynthSpec spec;
  std::string synth_out = "synth";
  auto* synth_cmd = app.add_subcommand("synth-data", "Write a planted-coherence corpus");
  synth_cmd->add_option("--out", synth_out, "Output directory")->capture_default_str();
  synth_cmd->add_option("--seed", spec.seed, "Random seed")->capture_default_str();
  synth_cmd->add_option("--paintings", spec.n_paintings, "Number of paintings")->capture_default_str();
  synth_cmd->add_option("--music", spec.n_music, "Number of music clips")->capture_default_str();
  synth_cmd->add_option("--pairs", spec.n_pairs, "Number of pairs")->capture_default_str();
  synth_cmd->add_option("--image-size", spec.image_size, "Painting side in pixels")->capture_default_str();
  synth_cmd->add_option("--seconds", spec.clip_seconds, "Clip duration")->capture_default_str();
  synth_cmd->add_option("--rater-noise", spec.rater_noise, "Half-width of rating noise")->capture_default_str();
  synth_cmd->add_option("--ambiguous-fraction", spec.ambiguous_fraction, "Share of pairs aimed at [0.4, 0.6]")
      ->capture_default_str();
  synth_cmd->add_option("--ambiguous-squash", spec.ambiguous_squash, "Pull of ambiguous ratings toward 0.5, in [0, 1]")
      ->capture_default_str();
  synth_cmd->add_option("--vote-temperature", spec.vote_temperature, "Preference vote temperature")
      ->capture_default_str();

  ServeOptions serve;
  auto* serve_cmd = app.add_subcommand("serve", "Run the annotation backend");
  serve_cmd->add_option("--data-root", serve.data_root, "Dataset directory")->capture_default_str();
  serve_cmd->add_option("--pairs", serve.pairs, "Pair manifest to annotate")->capture_default_str();
  serve_cmd->add_option("--log", serve.log, "Event log")->capture_default_str();
  serve_cmd->add_option("--tokens", serve.tokens, "Annotator token file")->capture_default_str();
  serve_cmd->add_option("--scores", serve.scores, "Model scores from eval --scores-out");
  serve_cmd->add_option("--host", serve.host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", serve.port, "Port")->capture_default_str();
  serve_cmd->add_option("--votes", serve.votes, "Votes per preference task")->capture_default_str();
  serve_cmd->add_option("--seed", serve.seed, "Preference pairing seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*train_cmd) return do_train(train_config, resume, out);
    if (*eval_cmd) return do_eval(eval, out);
    if (*score_cmd) return do_score(score, out);
    if (*synth_cmd) {
      const auto ds = synth::write_dataset(synth_out, spec);
      out << json{{"event", "synth"}, {"out", synth_out}, {"pairs", ds.pairs.size()},
                  {"preferences", ds.preferences.size()}}.dump()
          << "\n";
      return 0;
    }
    if (*serve_cmd) return do_serve(serve, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace mpjudge
