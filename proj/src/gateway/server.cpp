#include "sdl/gateway.hpp"

#include <httplib.h>

#include <thread>

namespace sdl::gateway {

using nlohmann::json;

namespace {

void send_error(httplib::Response& res, int status, const std::string& message) {
  res.status = status;
  res.set_content(payload_text({{"error", {{"status", status}, {"message", message}}}}), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& body) {
  try {
    res.set_content(payload_text(body()), "application/json");
    res.status = 200;
  } catch (const GatewayError& e) {
    send_error(res, e.status(), e.what());
  } catch (const json::exception& e) {
    send_error(res, 400, std::string("malformed request: ") + e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, e.what());
  }
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw GatewayError(400, std::string("body is not valid JSON: ") + e.what());
  }
}

Index index_param(const httplib::Request& req, const char* name, Index fallback) {
  if (!req.has_param(name)) return fallback;
  const std::string v = req.get_param_value(name);
  try {
    std::size_t used = 0;
    const Index i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw GatewayError(400, std::string("query parameter '") + name + "' must be an integer");
  }
}

}  // namespace

struct Server::Impl {
  Engine& engine;
  httplib::Server http;
  std::thread thread;
  explicit Impl(Engine& e) : engine(e) {}
};

Server::Server(Engine& engine) : impl_(std::make_unique<Impl>(engine)) {
  auto& http = impl_->http;
  Engine& e = engine;
  http.Get("/api/runs", [&e](const httplib::Request&, httplib::Response& res) { guarded(res, [&] { return e.runs(); }); });
  http.Get("/api/runs/:run/field", [&e](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      FieldRequest q;
      q.case_index = index_param(req, "case", 0);
      q.member = index_param(req, "member", 0);
      q.step = index_param(req, "step", 0);
      if (req.has_param("variable")) q.variable = req.get_param_value("variable");
      q.stats = req.has_param("stats") && req.get_param_value("stats") != "0" && req.get_param_value("stats") != "false";
      return e.field(req.path_params.at("run"), q);
    });
  });
  http.Post("/api/runs/:run/generate", [&e](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return e.generate(req.path_params.at("run"), generate_request_from_json(parse_body(req))); });
  });
  http.Post("/api/runs/:run/interpolate", [&e](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return e.interpolate(req.path_params.at("run"), interpolate_request_from_json(parse_body(req))); });
  });
  http.Post("/api/runs/:run/spectra", [&e](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { return e.spectra(req.path_params.at("run"), spectra_request_from_json(parse_body(req))); });
  });
  http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) send_error(res, res.status, res.status == 404 ? "no such endpoint" : "request failed");
  });
  // Browser UI served from another origin.
  http.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  http.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

Server::~Server() { stop(); }

bool Server::listen(const std::string& host, int port) { return impl_->http.listen(host, port); }

int Server::start_background(const std::string& host) {
  const int port = impl_->http.bind_to_any_port(host);
  if (port < 0) return port;
  impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
  return port;
}

void Server::stop() {
  if (!impl_) return;
  impl_->http.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace sdl::gateway
