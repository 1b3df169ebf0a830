#include "miner/service.hpp"

#include <thread>

#include <httplib.h>

#include "miner/base64.hpp"
#include "miner/error.hpp"

namespace miner {

using nlohmann::json;

struct AnnotationServer::Impl {
  AnnotationQueue& queue;
  httplib::Server server;
  std::thread thread;

  explicit Impl(AnnotationQueue& q) : queue(q) {}
};

namespace {

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json; charset=utf-8");
}

}  // namespace

json queue_item_json(const AnnotationRequest& r) {
  return {{"request_id", r.request_id},
          {"image_id", r.image_id},
          {"box", to_json(r.box)},
          {"s_score", r.s_score ? json(*r.s_score) : json(nullptr)},
          {"positive_categories", r.positive_categories},
          {"thumbnail_png_base64", base64_encode(r.thumbnail_png)},
          {"round", r.created_at}};
}

json stats_json(const QueueStats& s) {
  return {{"rounds", s.rounds},
          {"annotated_count", s.annotated_count},
          {"pseudo_count", s.pseudo_count},
          {"current_map", s.current_map ? json(*s.current_map) : json(nullptr)}};
}

AnnotationServer::AnnotationServer(AnnotationQueue& queue, int num_categories)
    : impl_(std::make_unique<Impl>(queue)) {
  auto& server = impl_->server;
  auto& q = impl_->queue;

  server.Get("/api/queue", [&q](const httplib::Request&, httplib::Response& res) {
    json items = json::array();
    for (const auto& r : q.pending()) items.push_back(queue_item_json(r));
    reply(res, 200, items);
  });

  server.Get("/api/stats", [&q](const httplib::Request&, httplib::Response& res) {
    reply(res, 200, stats_json(q.stats()));
  });

  server.Post("/api/labels", [&q, num_categories](const httplib::Request& req, httplib::Response& res) {
    AnnotationResult result;
    try {
      const auto body = json::parse(req.body);
      if (!body.is_object() || !body.contains("request_id") || !body.at("request_id").is_string() ||
          !body.contains("label") || !body.at("label").is_number_integer())
        throw Error(ErrorCode::MalformedRecord, "expected {request_id, label, corrected_box?}");
      for (const auto& [key, value] : body.items())
        if (key != "request_id" && key != "label" && key != "corrected_box")
          throw Error(ErrorCode::MalformedRecord, "unexpected field '" + key + "'");
      result.request_id = body.at("request_id").get<std::string>();
      result.label = body.at("label").get<int>();
      if (result.label != kBackgroundLabel && (result.label < 0 || result.label >= num_categories))
        throw Error(ErrorCode::MalformedRecord, "label out of range");
      if (body.contains("corrected_box") && !body.at("corrected_box").is_null())
        result.corrected_box = box_from_json(body.at("corrected_box"));
      result.annotator = AnnotatorKind::Human;
    } catch (const std::exception& e) {
      reply(res, 422, {{"status", "malformed"}, {"error", e.what()}});
      return;
    }
    const auto status = q.submit(result);
    switch (status) {
      case SubmitStatus::Accepted:
      case SubmitStatus::Duplicate:
        reply(res, 200, {{"status", to_string(status)}});
        break;
      case SubmitStatus::UnknownRequest:
        reply(res, 404, {{"status", to_string(status)}});
        break;
      case SubmitStatus::Expired:
      case SubmitStatus::Conflict:
        reply(res, 409, {{"status", to_string(status)}});
        break;
    }
  });

  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      if (ep) std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    reply(res, 500, {{"status", "error"}, {"error", what}});
  });
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::start(const std::string& host, int port) {
  auto& server = impl_->server;
  if (port == 0) {
    port_ = server.bind_to_any_port(host);
  } else {
    port_ = server.bind_to_port(host, port) ? port : -1;
  }
  if (port_ < 0) throw Error(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([&server] { server.listen_after_bind(); });
  server.wait_until_ready();
  return port_;
}

void AnnotationServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace miner
