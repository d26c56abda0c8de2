#include "caresurv/serve.hpp"

#include <httplib.h>

namespace caresurv {

struct HttpServer::Impl {
  PredictionService& service;
  httplib::Server server;

  explicit Impl(PredictionService& s) : service(s) {
    auto respond = [this](const httplib::Request& req, httplib::Response& res) {
      const auto r = service.handle(req.method, req.path, req.body);
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    for (const char* path : {"/health", "/model/metadata", "/cohort/baseline", "/predict", "/explain", "/whatif"}) {
      server.Get(path, respond);
      server.Post(path, respond);
    }
    server.set_error_handler([this](const httplib::Request& req, httplib::Response& res) {
      if (res.status != 404) return;
      const auto r = service.handle(req.method, req.path, req.body);
      res.set_content(r.body.dump(), "application/json");
    });
  }
};

HttpServer::HttpServer(PredictionService& service) : impl_(std::make_unique<Impl>(service)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw std::runtime_error("cannot bind to " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) {
    throw std::runtime_error("cannot bind to " + host + ":" + std::to_string(port));
  }
  return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace caresurv
