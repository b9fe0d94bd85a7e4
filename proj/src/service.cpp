#include "mpjudge/service.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

#include "httplib.h"
#include "mpjudge/errors.hpp"
#include "mpjudge/manifest.hpp"

namespace mpjudge::service {

namespace fs = std::filesystem;
using nlohmann::json;

struct AnnotationService::Snapshot {
  std::map<std::string, PairRecord> pairs;  // by pair_id; raw_scores fill in arrival order
  std::map<std::string, std::vector<std::pair<std::string, double>>> ratings;
  std::map<std::string, PreferenceRecord> tasks;  // open tasks and every task holding votes
  std::set<std::string> open_tasks;              // built from the current model scores
  std::map<std::pair<std::string, std::string>, json> acks;  // (task, annotator) -> acknowledgment
  std::map<std::string, double> model_scores;
  std::map<std::string, std::string> media;  // media id -> path relative to the data root
  std::uint64_t next_seq = 1;
};

namespace {

Reply error(int status, const std::string& code, const std::string& message) {
  return {status, json{{"error_code", code}, {"message", message}}};
}

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::vector<std::string> split_colon(const std::string& s) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == ':') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  return parts;
}

// Parses a preference task id against the corpus; nullopt when malformed or
// when a candidate pair is unknown.
std::optional<PreferenceRecord> parse_preference_id(const std::string& id,
                                                    const std::map<std::string, PairRecord>& pairs) {
  const auto parts = split_colon(id);
  if (parts.size() != 5 || parts[0] != "p") return std::nullopt;
  PreferenceRecord t;
  try {
    t.query_modality = parse_modality(parts[1]);
  } catch (const FormatError&) {
    return std::nullopt;
  }
  t.task_id = id;
  t.query_id = parts[2];
  t.candidate_a = parts[3];
  t.candidate_b = parts[4];
  if (t.candidate_a == t.candidate_b) return std::nullopt;
  auto known = [&](const std::string& cand) {
    const bool painting_query = t.query_modality == Modality::kPainting;
    const std::string pid = painting_query ? t.query_id : cand, mid = painting_query ? cand : t.query_id;
    return std::any_of(pairs.begin(), pairs.end(),
                       [&](const auto& kv) { return kv.second.painting_id == pid && kv.second.music_id == mid; });
  };
  if (!known(t.candidate_a) || !known(t.candidate_b)) return std::nullopt;
  return t;
}

void rebuild_open_tasks(std::map<std::string, PreferenceRecord>& tasks,
                        std::set<std::string>& open, const std::map<std::string, PairRecord>& pairs,
                        const std::map<std::string, double>& scores, Band band, std::uint64_t seed) {
  std::vector<PairRecord> scored;
  for (const auto& [id, p] : pairs) {
    auto it = scores.find(id);
    if (it == scores.end()) continue;
    PairRecord r = p;
    r.score = it->second;
    scored.push_back(std::move(r));
  }
  for (const auto& id : open)
    if (tasks.count(id) && tasks.at(id).votes.empty()) tasks.erase(id);
  open.clear();
  for (auto& t : build_preference_tasks(scored, band, seed)) {
    open.insert(t.task_id);
    tasks.emplace(t.task_id, std::move(t));
  }
}

json media_ref(const std::string& id) { return json{{"id", id}, {"url", "/media/" + id}}; }

}  // namespace

std::map<std::string, std::string> load_tokens(const fs::path& path) {
  const auto text = manifest::read_text(path);
  std::map<std::string, std::string> out;
  try {
    const auto j = json::parse(text);
    for (const auto& [token, who] : j.at("tokens").items()) out[token] = who.get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return out;
}

std::map<std::string, double> load_model_scores(const fs::path& path) {
  std::map<std::string, double> out;
  std::istringstream in(manifest::read_text(path));
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      out[j.at("pair_id").get<std::string>()] = j.at("score").get<double>();
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

std::string model_scores_to_jsonl(const std::map<std::string, double>& scores) {
  std::string out;
  for (const auto& [id, s] : scores) out += json{{"pair_id", id}, {"score", s}}.dump() + "\n";
  return out;
}

json event_to_json(const Event& e) {
  json payload = e.score ? json{{"score", *e.score}} : json{{"choice", std::string(1, e.choice.value_or('?'))}};
  return json{{"seq", e.seq},
              {"task_id", e.task_id},
              {"annotator", e.annotator},
              {"payload", payload},
              {"timestamp_ms", e.timestamp_ms}};
}

Event event_from_json(const json& j) {
  Event e;
  e.seq = j.at("seq").get<std::uint64_t>();
  e.task_id = j.at("task_id").get<std::string>();
  e.annotator = j.at("annotator").get<std::string>();
  e.timestamp_ms = j.at("timestamp_ms").get<std::int64_t>();
  const auto& p = j.at("payload");
  if (p.contains("score"))
    e.score = p.at("score").get<double>();
  else
    e.choice = p.at("choice").get<std::string>().at(0);
  return e;
}

AnnotationService::AnnotationService(ServiceConfig config) : config_(std::move(config)) {
  auto s = std::make_shared<Snapshot>();
  for (auto& p : manifest::load_pairs(config_.data_root / config_.pairs_manifest)) {
    p.raw_scores.clear();
    p.score.reset();
    s->media[p.painting_id] = p.painting_path;
    s->media[p.music_id] = p.music_path;
    const std::string id = p.pair_id;
    if (!s->pairs.emplace(id, std::move(p)).second) throw FormatError("duplicate pair_id '" + id + "'");
  }
  if (!config_.scores_path.empty() && fs::exists(config_.scores_path)) {
    s->model_scores = load_model_scores(config_.scores_path);
    scores_mtime_ = fs::last_write_time(config_.scores_path);
  }
  rebuild_open_tasks(s->tasks, s->open_tasks, s->pairs, s->model_scores, config_.band, config_.seed);

  if (!config_.log_path.empty() && fs::exists(config_.log_path)) {
    std::istringstream in(manifest::read_text(config_.log_path));
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      Event e;
      try {
        e = event_from_json(json::parse(line));
      } catch (const json::exception& ex) {
        throw FormatError(config_.log_path.string() + ":" + std::to_string(number) + ": " + ex.what());
      }
      // a task that has left the ambiguous band still accepts its logged votes
      if (e.task_id.rfind("p:", 0) == 0 && !s->tasks.count(e.task_id))
        if (auto t = parse_preference_id(e.task_id, s->pairs)) s->tasks.emplace(e.task_id, std::move(*t));
      const auto r = apply(*s, e, config_.votes_per_task);
      if (r.status >= 400)
        throw FormatError(config_.log_path.string() + ":" + std::to_string(number) + ": " +
                          r.body.value("message", std::string("rejected event")));
    }
  }
  snapshot_ = std::move(s);
}

std::optional<std::string> AnnotationService::authenticate(const std::string& token) const {
  auto it = config_.tokens.find(token);
  if (it == config_.tokens.end()) return std::nullopt;
  return it->second;
}

std::shared_ptr<const AnnotationService::Snapshot> AnnotationService::snapshot() const {
  std::lock_guard lock(snapshot_mutex_);
  return snapshot_;
}

void AnnotationService::publish(std::shared_ptr<const Snapshot> next) {
  std::lock_guard lock(snapshot_mutex_);
  snapshot_ = std::move(next);
}

Reply AnnotationService::apply(Snapshot& s, const Event& e, std::size_t votes_per_task) {
  const auto key = std::make_pair(e.task_id, e.annotator);
  if (auto it = s.acks.find(key); it != s.acks.end()) return {200, it->second};

  json ack{{"task_id", e.task_id}, {"annotator", e.annotator}, {"seq", e.seq}, {"timestamp_ms", e.timestamp_ms}};
  if (e.task_id.rfind("s:", 0) == 0) {
    auto it = s.pairs.find(e.task_id.substr(2));
    if (it == s.pairs.end()) return error(404, "not_found", "unknown task '" + e.task_id + "'");
    if (!e.score) return error(400, "validation_error", "scalar tasks take a numeric 'score'");
    if (!(*e.score >= 0.0 && *e.score <= 1.0)) return error(400, "validation_error", "score must lie in [0, 1]");
    auto& rec = it->second;
    if (rec.raw_scores.size() >= kRatingsPerPair)
      return error(409, "task_closed", "pair already has " + std::to_string(kRatingsPerPair) + " ratings");
    rec.raw_scores.push_back(*e.score);
    s.ratings[rec.pair_id].push_back({e.annotator, *e.score});
    ack["ratings"] = rec.raw_scores.size();
    if (rec.raw_scores.size() == kRatingsPerPair) rec.score = aggregate_scores(rec.raw_scores);
    ack["finalized"] = rec.score.has_value();
    if (rec.score) ack["score"] = *rec.score;
  } else {
    auto it = s.tasks.find(e.task_id);
    if (it == s.tasks.end()) return error(404, "not_found", "unknown task '" + e.task_id + "'");
    if (!e.choice || (*e.choice != 'A' && *e.choice != 'B'))
      return error(400, "validation_error", "preference tasks take 'choice' of \"A\" or \"B\"");
    auto& task = it->second;
    if (task.votes.size() >= votes_per_task)
      return error(409, "task_closed", "task already has " + std::to_string(votes_per_task) + " votes");
    task.votes.push_back({e.annotator, *e.choice});
    ack["votes"] = task.votes.size();
    if (task.votes.size() == votes_per_task) task.consensus = majority(task.votes, votes_per_task);
    ack["resolved"] = task.votes.size() == votes_per_task;
    ack["consensus"] = task.consensus ? json(std::string(1, *task.consensus)) : json(nullptr);
  }
  ack["status"] = "recorded";
  s.acks[key] = ack;
  s.next_seq = std::max(s.next_seq, e.seq + 1);
  return {201, ack};
}

Reply AnnotationService::next_task(const std::string& annotator, const std::string& kind) const {
  const auto s = snapshot();
  if (kind == "scalar") {
    const PairRecord* best = nullptr;
    for (const auto& [id, p] : s->pairs) {
      if (p.raw_scores.size() >= kRatingsPerPair || s->acks.count({"s:" + id, annotator})) continue;
      if (!best || p.raw_scores.size() < best->raw_scores.size()) best = &p;
    }
    if (!best) return {204, json()};
    return {200, json{{"kind", "scalar"},
                      {"task_id", "s:" + best->pair_id},
                      {"pair_id", best->pair_id},
                      {"painting", media_ref(best->painting_id)},
                      {"music", media_ref(best->music_id)},
                      {"ratings", best->raw_scores.size()},
                      {"slider", {{"min", 0.0}, {"max", 1.0}, {"step", 0.01}}}}};
  }
  if (kind == "preference") {
    const PreferenceRecord* best = nullptr;
    for (const auto& id : s->open_tasks) {
      const auto& t = s->tasks.at(id);
      if (t.votes.size() >= config_.votes_per_task || s->acks.count({id, annotator})) continue;
      if (!best || t.votes.size() < best->votes.size()) best = &t;
    }
    if (!best) return {204, json()};
    json query = media_ref(best->query_id);
    query["modality"] = modality_name(best->query_modality);
    return {200, json{{"kind", "preference"},
                      {"task_id", best->task_id},
                      {"query", query},
                      {"candidate_a", media_ref(best->candidate_a)},
                      {"candidate_b", media_ref(best->candidate_b)},
                      {"votes", best->votes.size()}}};
  }
  return error(400, "validation_error", "kind must be 'scalar' or 'preference'");
}

Reply AnnotationService::submit(const std::string& annotator, const std::string& task_id, const json& payload) {
  Event e;
  e.task_id = task_id;
  e.annotator = annotator;
  if (!payload.is_object()) return error(400, "validation_error", "body must be a JSON object");
  if (payload.contains("score")) {
    if (!payload["score"].is_number()) return error(400, "validation_error", "'score' must be a number");
    e.score = payload["score"].get<double>();
  } else if (payload.contains("choice")) {
    const auto& c = payload["choice"];
    if (!c.is_string() || (c != "A" && c != "B"))
      return error(400, "validation_error", "'choice' must be \"A\" or \"B\"");
    e.choice = c.get<std::string>()[0];
  } else {
    return error(400, "validation_error", "body needs 'score' or 'choice'");
  }

  std::lock_guard lock(writer_mutex_);
  const auto current = snapshot();
  if (auto it = current->acks.find({task_id, annotator}); it != current->acks.end()) return {200, it->second};
  auto next = std::make_shared<Snapshot>(*current);
  e.seq = next->next_seq;
  e.timestamp_ms = now_ms();
  Reply r = apply(*next, e, config_.votes_per_task);
  if (r.status != 201) return r;
  if (!config_.log_path.empty()) {
    std::ofstream log(config_.log_path, std::ios::app | std::ios::binary);
    log << event_to_json(e).dump() << '\n';
    log.flush();
    if (!log) return error(500, "storage_error", "could not append to the event log");
  }
  publish(std::move(next));
  return r;
}

json AnnotationService::export_dataset() const {
  const auto s = snapshot();
  std::vector<PairRecord> pairs;
  for (const auto& [id, p] : s->pairs)
    if (p.score) pairs.push_back(p);
  std::vector<PreferenceRecord> prefs;
  for (const auto& [id, t] : s->tasks)
    if (t.consensus) prefs.push_back(t);
  return json{{"schema_version", kExportSchemaVersion},
              {"pair_fields", {"pair_id", "painting_id", "music_id", "raw_scores", "score", "painting_path", "music_path"}},
              {"preference_fields", {"task_id", "query", "candidate_a", "candidate_b", "votes", "consensus"}},
              {"pairs_count", pairs.size()},
              {"preferences_count", prefs.size()},
              {"pairs_jsonl", manifest::pairs_to_jsonl(pairs)},
              {"preferences_jsonl", manifest::preferences_to_jsonl(prefs)}};
}

json AnnotationService::stats() const {
  const auto s = snapshot();
  std::vector<PairRecord> finalized;
  std::vector<std::vector<double>> multi;
  std::size_t ratings = 0;
  for (const auto& [id, p] : s->pairs) {
    ratings += p.raw_scores.size();
    if (p.score) finalized.push_back(p);
    if (p.raw_scores.size() >= 2) multi.push_back(p.raw_scores);
  }
  std::size_t votes = 0, resolved = 0, open = 0;
  for (const auto& [id, t] : s->tasks) {
    votes += t.votes.size();
    resolved += t.consensus.has_value();
  }
  for (const auto& id : s->open_tasks) open += s->tasks.at(id).votes.size() < config_.votes_per_task;
  const auto d = dispersion_stats(finalized);
  json out{{"counts",
            {{"pairs", s->pairs.size()},
             {"pairs_finalized", finalized.size()},
             {"ratings", ratings},
             {"preference_tasks_open", open},
             {"preference_votes", votes},
             {"preferences_resolved", resolved}}},
           {"dispersion",
            {{"records", d.records},
             {"mean_stddev", d.mean_stddev},
             {"fraction_below_009", d.fraction_below_009},
             {"fraction_below_011", d.fraction_below_011}}}};
  if (multi.size() < 2) {
    out["alpha"] = nullptr;
    out["alpha_unavailable_reason"] = "fewer than two items with at least two ratings";
  } else {
    const auto a = krippendorff_alpha(multi);
    out["alpha"] = {{"value", a.alpha},   {"observed", a.observed}, {"expected", a.expected},
                    {"degenerate", a.degenerate}, {"items", a.items}, {"ratings", a.ratings}};
  }
  return out;
}

void AnnotationService::set_model_scores(std::map<std::string, double> scores) {
  std::lock_guard lock(writer_mutex_);
  auto next = std::make_shared<Snapshot>(*snapshot());
  next->model_scores = std::move(scores);
  rebuild_open_tasks(next->tasks, next->open_tasks, next->pairs, next->model_scores, config_.band,
                     config_.seed);
  publish(std::move(next));
}

void AnnotationService::refresh_model_scores() {
  if (config_.scores_path.empty() || !fs::exists(config_.scores_path)) return;
  const auto mtime = fs::last_write_time(config_.scores_path);
  if (mtime == scores_mtime_) return;
  scores_mtime_ = mtime;
  set_model_scores(load_model_scores(config_.scores_path));
}

std::optional<fs::path> AnnotationService::media_path(const std::string& id) const {
  const auto s = snapshot();
  auto it = s->media.find(id);
  if (it == s->media.end()) return std::nullopt;
  return config_.data_root / it->second;
}

json AnnotationService::state() const {
  const auto s = snapshot();
  json pairs = json::object(), tasks = json::object(), acks = json::array();
  for (const auto& [id, p] : s->pairs) {
    json r = json::array();
    for (const auto& [who, v] : s->ratings.count(id) ? s->ratings.at(id) : decltype(s->ratings)::mapped_type{})
      r.push_back({who, v});
    pairs[id] = {{"ratings", r}, {"score", p.score ? json(*p.score) : json(nullptr)}};
  }
  for (const auto& [id, t] : s->tasks) tasks[id] = manifest::to_json(t);
  for (const auto& [key, ack] : s->acks) acks.push_back(ack);
  return json{{"pairs", pairs},
              {"tasks", tasks},
              {"open_tasks", s->open_tasks},
              {"acks", acks},
              {"next_seq", s->next_seq},
              {"stats", stats()}};
}

void AnnotationService::register_routes(httplib::Server& server) {
  auto send = [](httplib::Response& res, const Reply& r) {
    res.status = r.status;
    if (r.status != 204) res.set_content(r.body.dump(), "application/json");
  };
  // Bearer header, X-Annotator-Token header, or ?token= for media elements
  auto who = [this](const httplib::Request& req) -> std::optional<std::string> {
    std::string token;
    const auto auth = req.get_header_value("Authorization");
    if (auth.rfind("Bearer ", 0) == 0)
      token = auth.substr(7);
    else if (req.has_header("X-Annotator-Token"))
      token = req.get_header_value("X-Annotator-Token");
    else if (req.has_param("token"))
      token = req.get_param_value("token");
    return authenticate(token);
  };
  auto unauthorized = error(401, "unauthorized", "missing or unknown annotator token");

  server.Get("/api/tasks/next", [=, this](const httplib::Request& req, httplib::Response& res) {
    const auto annotator = who(req);
    if (!annotator) return send(res, unauthorized);
    refresh_model_scores();
    send(res, next_task(*annotator, req.has_param("kind") ? req.get_param_value("kind") : "scalar"));
  });
  server.Post(R"(/api/tasks/(.+)/response)", [=, this](const httplib::Request& req, httplib::Response& res) {
    const auto annotator = who(req);
    if (!annotator) return send(res, unauthorized);
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      return send(res, error(400, "validation_error", "body is not valid JSON"));
    }
    send(res, submit(*annotator, httplib::detail::decode_url(req.matches[1].str(), false), body));
  });
  server.Get("/api/export", [=, this](const httplib::Request& req, httplib::Response& res) {
    if (!who(req)) return send(res, unauthorized);
    send(res, {200, export_dataset()});
  });
  server.Get("/api/stats", [=, this](const httplib::Request& req, httplib::Response& res) {
    if (!who(req)) return send(res, unauthorized);
    send(res, {200, stats()});
  });
  server.Get(R"(/media/([^/]+))", [=, this](const httplib::Request& req, httplib::Response& res) {
    const auto path = media_path(req.matches[1].str());
    if (!path || !fs::exists(*path)) return send(res, error(404, "not_found", "unknown media id"));
    const auto ext = path->extension().string();
    const char* type = ext == ".png" ? "image/png" : ext == ".wav" ? "audio/wav" : "application/octet-stream";
    const auto bytes = manifest::read_text(*path);
    res.status = 200;
    res.set_content(bytes, type);
  });
}

}  // namespace mpjudge::service
