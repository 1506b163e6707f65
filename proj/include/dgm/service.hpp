#pragma once

#include "dgm/applications.hpp"
#include "dgm/serialize.hpp"
#include "httplib.h"

namespace dgm {

// Files of a hierarchy bundle directory.
namespace bundle_file {
inline constexpr const char* kHierarchy = "hierarchy.json";
inline constexpr const char* kSuperpixels = "superpixels.dgmt";
inline constexpr const char* kImage = "image.ppm";
inline constexpr const char* kGradcam = "gradcam.json";
inline constexpr const char* kManifest = "manifest.json";
}  // namespace bundle_file

/// Immutable state served over HTTP.
struct Bundle {
  Hierarchy<float> hierarchy;
  SuperpixelMap superpixels;
  std::optional<ByteSequence> image;               // PPM bytes
  std::vector<std::vector<double>> gradcam;        // per-level vertex heat; may be empty
};

inline json gradcam_to_json(const std::vector<std::vector<double>>& heat) {
  return {{"levels", heat}};
}

inline Bundle load_bundle(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Bundle b;
  b.hierarchy = load_hierarchy<float>(dir / bundle_file::kHierarchy);
  b.superpixels = validate_label_map(load_tensor(dir / bundle_file::kSuperpixels), b.hierarchy.config.max_superpixels);
  if (b.superpixels.num_regions != b.hierarchy.levels[0].size())
    throw Error(ErrorCode::ShapeMismatch, "superpixel count does not match hierarchy level 1");
  if (fs::exists(dir / bundle_file::kImage)) b.image = read_file(dir / bundle_file::kImage);
  if (fs::exists(dir / bundle_file::kGradcam)) {
    const auto bytes = read_file(dir / bundle_file::kGradcam);
    const json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded() || !j.contains("levels")) throw Error(ErrorCode::Parse, "bad gradcam.json");
    b.gradcam = j.at("levels").get<std::vector<std::vector<double>>>();
    if (b.gradcam.size() != b.hierarchy.num_levels()) throw Error(ErrorCode::Parse, "gradcam level count mismatch");
    for (std::size_t l = 0; l < b.gradcam.size(); ++l)
      if (b.gradcam[l].size() != b.hierarchy.levels[l].size())
        throw Error(ErrorCode::Parse, "gradcam heat length mismatch at level " + std::to_string(l + 1));
  }
  return b;
}

struct ApiResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

namespace detail {
inline ApiResponse api_error(int status, const std::string& message) {
  return {status, json{{"error", message}}.dump(), "application/json"};
}

inline std::optional<std::size_t> parse_level(const std::string& s, std::size_t levels) {
  if (s.empty() || s.size() > 6 || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; }))
    return std::nullopt;
  const auto l = static_cast<std::size_t>(std::stoul(s));
  if (l < 1 || l > levels) return std::nullopt;
  return l;
}
}  // namespace detail

/// Request handlers, independent of the HTTP transport. All are pure
/// functions of the bundle and the request.
class Api {
 public:
  explicit Api(const Bundle& b) : b_(b) {}

  ApiResponse meta() const {
    const auto& h = b_.hierarchy;
    return {200,
            json{{"levels", h.num_levels()},
                 {"sizes", h.sizes()},
                 {"height", b_.superpixels.height},
                 {"width", b_.superpixels.width},
                 {"num_superpixels", b_.superpixels.num_regions},
                 {"tdmp", h.config.tdmp_enabled},
                 {"has_image", b_.image.has_value()},
                 {"has_gradcam", !b_.gradcam.empty()}}
                .dump()};
  }

  ApiResponse labels(const std::string& level) const {
    const auto l = detail::parse_level(level, b_.hierarchy.num_levels());
    if (!l) return detail::api_error(404, "unknown level " + level);
    const auto anc = hard_assignment(b_.hierarchy, *l);
    std::vector<std::int32_t> px(b_.superpixels.labels.size());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = anc[static_cast<std::size_t>(b_.superpixels.labels[i])];
    return {200, json{{"level", *l}, {"labels", rle_encode(b_.superpixels.height, b_.superpixels.width, px)}}.dump()};
  }

  ApiResponse click(const std::string& body) const {
    const json j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return detail::api_error(400, "body is not a JSON object");
    ClickSet cs;
    try {
      const auto& lv = j.at("level");
      if (!lv.is_number_integer()) return detail::api_error(400, "level must be an integer");
      const auto l = lv.get<std::int64_t>();
      if (l < 1 || l > static_cast<std::int64_t>(b_.hierarchy.num_levels()))
        return detail::api_error(404, "unknown level " + std::to_string(l));
      cs.level = static_cast<std::size_t>(l);
      const auto& clicks = j.at("clicks");
      if (!clicks.is_array()) return detail::api_error(400, "clicks must be an array");
      for (const auto& c : clicks) {
        if (!c.at("x").is_number_integer() || !c.at("y").is_number_integer())
          return detail::api_error(400, "click coordinates must be integers");
        const auto pol = c.at("polarity").get<std::string>();
        if (pol != "positive" && pol != "negative") return detail::api_error(400, "polarity must be positive or negative");
        cs.clicks.push_back({c.at("x").get<std::int64_t>(), c.at("y").get<std::int64_t>(), pol == "positive"});
      }
    } catch (const json::exception& e) {
      return detail::api_error(400, std::string("malformed click request: ") + e.what());
    }
    try {
      const auto m = click_propagate(b_.hierarchy, b_.superpixels, cs);
      return {200, json{{"level", cs.level}, {"count", m.count()}, {"mask", rle_encode(m.height, m.width, m.data)}}.dump()};
    } catch (const Error& e) {
      if (e.code() == ErrorCode::OutOfBounds) return detail::api_error(422, e.what());
      throw;
    }
  }

  ApiResponse gradcam(const std::string& level) const {
    const auto l = detail::parse_level(level, b_.hierarchy.num_levels());
    if (!l) return detail::api_error(404, "unknown level " + level);
    if (b_.gradcam.empty()) return detail::api_error(404, "bundle has no Grad-CAM data");
    const auto anc = hard_assignment(b_.hierarchy, *l);
    const auto& heat = b_.gradcam[*l - 1];
    std::vector<double> px(b_.superpixels.labels.size());
    for (std::size_t i = 0; i < px.size(); ++i)
      px[i] = heat[static_cast<std::size_t>(anc[static_cast<std::size_t>(b_.superpixels.labels[i])])];
    return {200, json{{"level", *l}, {"heat", rle_encode(b_.superpixels.height, b_.superpixels.width, heat_pixels(px))}}.dump()};
  }

  ApiResponse image() const {
    if (!b_.image) return detail::api_error(404, "bundle has no image");
    return {200, std::string(b_.image->begin(), b_.image->end()), "image/x-portable-pixmap"};
  }

 private:
  const Bundle& b_;
};

/// Registers the API routes (and optionally a static directory under /) on `srv`.
/// The bundle must outlive the server.
inline void install_routes(httplib::Server& srv, const Bundle& bundle,
                           const std::optional<std::filesystem::path>& static_dir = std::nullopt) {
  auto api = std::make_shared<Api>(bundle);
  auto send = [](httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  srv.Get("/api/meta", [api, send](const httplib::Request&, httplib::Response& res) { send(res, api->meta()); });
  srv.Get(R"(/api/levels/([^/]+)/labels)", [api, send](const httplib::Request& req, httplib::Response& res) {
    send(res, api->labels(req.matches[1]));
  });
  srv.Post("/api/click", [api, send](const httplib::Request& req, httplib::Response& res) { send(res, api->click(req.body)); });
  srv.Get(R"(/api/gradcam/([^/]+))", [api, send](const httplib::Request& req, httplib::Response& res) {
    send(res, api->gradcam(req.matches[1]));
  });
  srv.Get("/api/image", [api, send](const httplib::Request&, httplib::Response& res) { send(res, api->image()); });
  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string msg = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      msg = e.what();
    } catch (...) {
    }
    res.status = 500;
    res.set_content(json{{"error", msg}}.dump(), "application/json");
  });
  if (static_dir && std::filesystem::is_directory(*static_dir)) srv.set_mount_point("/", static_dir->string());
}

}  // namespace dgm
