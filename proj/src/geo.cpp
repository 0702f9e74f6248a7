#include "transfertraj/geo.hpp"

#include <openssl/sha.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "transfertraj/rng.hpp"

namespace transfertraj {

namespace {

constexpr double kMetersPerDegLat = M_PI * kEarthRadiusM / 180.0;

double deg2rad(double d) { return d * M_PI / 180.0; }

void append_double(std::string& out, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

}  // namespace

double haversine_m(const GeoPoint& a, const GeoPoint& b) {
  const double lat1 = deg2rad(a.lat);
  const double lat2 = deg2rad(b.lat);
  const double dlat = lat2 - lat1;
  const double dlng = deg2rad(b.lng - a.lng);
  const double s1 = std::sin(dlat / 2.0);
  const double s2 = std::sin(dlng / 2.0);
  const double h = s1 * s1 + std::cos(lat1) * std::cos(lat2) * s2 * s2;
  return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(h)));
}

std::string sha256_hex(const std::string& text) {
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(text.data()), text.size(), digest);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * SHA256_DIGEST_LENGTH);
  for (unsigned char c : digest) {
    out.push_back(hex[c >> 4]);
    out.push_back(hex[c & 0xf]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// GridIndex
// ---------------------------------------------------------------------------

GridIndex::GridIndex(const std::vector<GeoPoint>& items, double cell_m)
    : items_(items), cell_m_(cell_m) {
  if (cell_m <= 0.0) throw InvalidConfig("grid cell size must be positive");
  double max_abs_lat = 0.0;
  for (const auto& p : items_) max_abs_lat = std::max(max_abs_lat, std::abs(p.lat));
  // Half a degree of slack so queries slightly outside the item bounds still
  // land in cells wide enough for 3x3 coverage.
  const double cos_lat = std::max(0.01, std::cos(deg2rad(std::min(89.0, max_abs_lat + 0.5))));
  cell_lat_deg_ = cell_m / kMetersPerDegLat;
  cell_lng_deg_ = cell_m / (kMetersPerDegLat * cos_lat);
  for (int i = 0; i < static_cast<int>(items_.size()); ++i) {
    cells_[cell_of({items_[i].lng, items_[i].lat})].push_back(i);
  }
}

std::pair<std::int64_t, std::int64_t> GridIndex::cell_of(const GeoPoint& p) const {
  return {static_cast<std::int64_t>(std::floor(p.lng / cell_lng_deg_)),
          static_cast<std::int64_t>(std::floor(p.lat / cell_lat_deg_))};
}

std::vector<NeighborHit> GridIndex::query(const GeoPoint& query, double radius_m) const {
  if (radius_m > cell_m_) {
    throw InvalidConfig("query radius exceeds the grid cell size this index was built with");
  }
  std::vector<NeighborHit> hits;
  if (items_.empty()) return hits;
  const auto center = cell_of(query);
  for (std::int64_t dx = -1; dx <= 1; ++dx) {
    for (std::int64_t dy = -1; dy <= 1; ++dy) {
      const auto it = cells_.find({center.first + dx, center.second + dy});
      if (it == cells_.end()) continue;
      for (int idx : it->second) {
        const double dist = haversine_m(query, {items_[idx].lng, items_[idx].lat});
        if (dist <= radius_m) hits.push_back({idx, dist});
      }
    }
  }
  std::sort(hits.begin(), hits.end(), [](const NeighborHit& a, const NeighborHit& b) {
    if (a.dist_m != b.dist_m) return a.dist_m < b.dist_m;
    return a.index < b.index;
  });
  return hits;
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

StubTextProvider::StubTextProvider(int dim) : dim_(dim) {
  if (dim <= 0) throw InvalidConfig("stub provider dim must be positive");
}

std::vector<Eigen::VectorXd> StubTextProvider::embed(const std::vector<std::string>& texts) const {
  std::vector<Eigen::VectorXd> out;
  out.reserve(texts.size());
  for (const auto& text : texts) {
    unsigned char digest[SHA256_DIGEST_LENGTH];
    SHA256(reinterpret_cast<const unsigned char*>(text.data()), text.size(), digest);
    std::uint64_t seed = 0;
    for (int i = 0; i < 8; ++i) seed = (seed << 8) | digest[i];
    Rng rng(seed);
    Eigen::VectorXd v(dim_);
    for (int i = 0; i < dim_; ++i) v[i] = rng.normal();
    const double norm = v.norm();
    if (norm > 0.0) v /= norm;
    else v[0] = 1.0;
    out.push_back(std::move(v));
  }
  return out;
}

RemoteTextProvider::RemoteTextProvider(std::string endpoint, std::string api_key,
                                       std::string model, int dim)
    : api_key_(std::move(api_key)), model_(std::move(model)), dim_(dim) {
  if (dim <= 0) throw InvalidConfig("remote provider dim must be positive");
  const std::string http = "http://";
  if (endpoint.rfind(http, 0) != 0) {
    throw ProviderUnavailable("unsupported embedding endpoint (expected http://): " + endpoint);
  }
  std::string rest = endpoint.substr(http.size());
  const auto slash = rest.find('/');
  std::string hostport = slash == std::string::npos ? rest : rest.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : rest.substr(slash);
  const auto colon = hostport.find(':');
  if (colon == std::string::npos) {
    host_ = hostport;
  } else {
    host_ = hostport.substr(0, colon);
    port_ = std::atoi(hostport.c_str() + colon + 1);
  }
  if (host_.empty() || port_ <= 0) {
    throw ProviderUnavailable("malformed embedding endpoint: " + endpoint);
  }
}

std::unique_ptr<RemoteTextProvider> RemoteTextProvider::from_env(int dim) {
  const char* endpoint = std::getenv("TT_EMBED_ENDPOINT");
  if (endpoint == nullptr || *endpoint == '\0') return nullptr;
  const char* key = std::getenv("TT_EMBED_API_KEY");
  const char* model = std::getenv("TT_EMBED_MODEL");
  return std::make_unique<RemoteTextProvider>(endpoint, key ? key : "",
                                              model ? model : "default", dim);
}

std::vector<Eigen::VectorXd> RemoteTextProvider::embed(const std::vector<std::string>& texts) const {
  httplib::Client client(host_, port_);
  client.set_connection_timeout(10);
  client.set_read_timeout(60);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  nlohmann::json body;
  body["model"] = model_;
  body["input"] = texts;
  const auto res = client.Post(path_, headers, body.dump(), "application/json");
  if (!res || res->status != 200) {
    throw ProviderUnavailable("embedding endpoint request failed: " + host_ + path_ +
                              (res ? " status " + std::to_string(res->status) : " (no response)"));
  }
  std::vector<Eigen::VectorXd> out;
  try {
    const auto parsed = nlohmann::json::parse(res->body);
    for (const auto& item : parsed.at("data")) {
      const auto& emb = item.at("embedding");
      Eigen::VectorXd v(static_cast<int>(emb.size()));
      for (int i = 0; i < v.size(); ++i) v[i] = emb[i].get<double>();
      out.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ProviderUnavailable(std::string("malformed embedding response: ") + e.what());
  }
  if (out.size() != texts.size()) {
    throw ProviderUnavailable("embedding response count does not match request");
  }
  for (const auto& v : out) {
    if (v.size() != dim_) throw DimMismatch("embedding response dim does not match provider dim");
  }
  return out;
}

// ---------------------------------------------------------------------------
// EmbeddingCache
// ---------------------------------------------------------------------------

std::optional<Eigen::VectorXd> EmbeddingCache::get(const std::string& hash_hex) const {
  std::lock_guard<std::mutex> lock(mu_);
  const auto it = entries_.find(hash_hex);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void EmbeddingCache::put(const std::string& hash_hex, const Eigen::VectorXd& v) {
  std::lock_guard<std::mutex> lock(mu_);
  entries_[hash_hex] = v;
}

int EmbeddingCache::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return static_cast<int>(entries_.size());
}

void EmbeddingCache::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embedding cache: " + path);
  std::string line;
  int line_no = 0;
  std::lock_guard<std::mutex> lock(mu_);
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string hash;
    int dim = 0;
    if (!(is >> hash >> dim) || dim <= 0) {
      throw ParseError("embedding cache line " + std::to_string(line_no) + ": bad header");
    }
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) {
      if (!(is >> v[i])) {
        throw ParseError("embedding cache line " + std::to_string(line_no) + ": truncated vector");
      }
    }
    entries_[hash] = std::move(v);
  }
}

void EmbeddingCache::save(const std::string& path) const {
  std::map<std::string, Eigen::VectorXd> sorted;
  {
    std::lock_guard<std::mutex> lock(mu_);
    sorted.insert(entries_.begin(), entries_.end());
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write embedding cache: " + path);
  for (const auto& [hash, v] : sorted) {
    std::string line = hash + ' ' + std::to_string(v.size());
    for (int i = 0; i < v.size(); ++i) {
      line += ' ';
      append_double(line, v[i]);
    }
    out << line << '\n';
  }
}

// ---------------------------------------------------------------------------
// Region context
// ---------------------------------------------------------------------------

RegionContext build_region_context(std::vector<Poi> pois, std::vector<RoadSegment> roads,
                                   double poi_radius_m, double road_radius_m,
                                   std::shared_ptr<const TextEmbeddingProvider> provider,
                                   std::shared_ptr<EmbeddingCache> cache) {
  RegionContext ctx;
  ctx.pois = std::move(pois);
  ctx.roads = std::move(roads);
  std::vector<GeoPoint> pts;
  pts.reserve(ctx.pois.size());
  for (const auto& p : ctx.pois) pts.push_back({p.lng, p.lat});
  ctx.poi_index = GridIndex(pts, poi_radius_m);
  pts.clear();
  for (const auto& r : ctx.roads) pts.push_back({r.lng, r.lat});
  ctx.road_index = GridIndex(pts, road_radius_m);
  ctx.provider = std::move(provider);
  ctx.cache = cache ? std::move(cache) : std::make_shared<EmbeddingCache>();
  return ctx;
}

std::vector<NeighborHit> poi_neighbors(const RegionContext& ctx, const GeoPoint& p, double radius_m) {
  return ctx.poi_index.query(p, radius_m);
}

std::vector<NeighborHit> road_neighbors(const RegionContext& ctx, const GeoPoint& p, double radius_m) {
  return ctx.road_index.query(p, radius_m);
}

std::vector<Eigen::VectorXd> embed_texts(const TextEmbeddingProvider& provider,
                                         EmbeddingCache& cache,
                                         const std::vector<std::string>& texts) {
  std::vector<Eigen::VectorXd> out(texts.size());
  std::vector<std::string> hashes(texts.size());
  std::vector<int> misses;
  for (int i = 0; i < static_cast<int>(texts.size()); ++i) {
    hashes[i] = sha256_hex(texts[i]);
    if (auto hit = cache.get(hashes[i])) {
      if (hit->size() != provider.dim()) {
        throw DimMismatch("cached embedding dim does not match provider dim");
      }
      out[i] = std::move(*hit);
    } else {
      misses.push_back(i);
    }
  }
  if (!misses.empty()) {
    std::vector<std::string> miss_texts;
    std::map<std::string, int> miss_slot;
    for (int i : misses) {
      if (miss_slot.emplace(hashes[i], static_cast<int>(miss_texts.size())).second) {
        miss_texts.push_back(texts[i]);
      }
    }
    const auto fresh = provider.embed(miss_texts);
    if (fresh.size() != miss_texts.size()) {
      throw DimMismatch("provider returned a different number of embeddings than requested");
    }
    for (int i : misses) {
      const Eigen::VectorXd& v = fresh[miss_slot.at(hashes[i])];
      if (v.size() != provider.dim()) {
        throw DimMismatch("provider embedding dim does not match its declared dim");
      }
      cache.put(hashes[i], v);
      out[i] = v;
    }
  }
  return out;
}

namespace {

std::optional<Eigen::VectorXd> pooled_context(const RegionContext& ctx, const GeoPoint& p,
                                              double radius_m, bool use_pois) {
  if (!ctx.provider) throw ProviderUnavailable("region context has no embedding provider");
  const auto hits = use_pois ? poi_neighbors(ctx, p, radius_m) : road_neighbors(ctx, p, radius_m);
  if (hits.empty()) return std::nullopt;
  std::vector<std::string> descs;
  descs.reserve(hits.size());
  for (const auto& h : hits) {
    descs.push_back(use_pois ? ctx.pois[h.index].desc : ctx.roads[h.index].desc);
  }
  const auto embs = embed_texts(*ctx.provider, *ctx.cache, descs);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(ctx.provider->dim());
  for (const auto& e : embs) mean += e;
  mean /= static_cast<double>(embs.size());
  return mean;
}

}  // namespace

std::optional<Eigen::VectorXd> pooled_poi_context(const RegionContext& ctx, const GeoPoint& p,
                                                  double radius_m) {
  return pooled_context(ctx, p, radius_m, true);
}

std::optional<Eigen::VectorXd> pooled_road_context(const RegionContext& ctx, const GeoPoint& p,
                                                   double radius_m) {
  return pooled_context(ctx, p, radius_m, false);
}

// ---------------------------------------------------------------------------
// Store files
// ---------------------------------------------------------------------------

namespace {

struct StoreRow {
  double lng;
  double lat;
  std::string desc;
};

std::vector<StoreRow> load_store_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open store file: " + path);
  std::vector<StoreRow> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      throw ParseError("store file " + path + " line " + std::to_string(line_no) +
                       ": expected 3 tab-separated columns");
    }
    char* end = nullptr;
    const std::string lng_s = line.substr(0, t1);
    const std::string lat_s = line.substr(t1 + 1, t2 - t1 - 1);
    const double lng = std::strtod(lng_s.c_str(), &end);
    if (end != lng_s.c_str() + lng_s.size() || lng_s.empty()) {
      throw ParseError("store file " + path + " line " + std::to_string(line_no) + ": bad lng");
    }
    const double lat = std::strtod(lat_s.c_str(), &end);
    if (end != lat_s.c_str() + lat_s.size() || lat_s.empty()) {
      throw ParseError("store file " + path + " line " + std::to_string(line_no) + ": bad lat");
    }
    rows.push_back({lng, lat, line.substr(t2 + 1)});
  }
  return rows;
}

void save_store_rows(const std::string& path, const std::vector<StoreRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write store file: " + path);
  for (const auto& r : rows) {
    std::string line;
    append_double(line, r.lng);
    line += '\t';
    append_double(line, r.lat);
    line += '\t';
    line += r.desc;
    out << line << '\n';
  }
}

}  // namespace

std::vector<Poi> load_poi_store(const std::string& path) {
  std::vector<Poi> out;
  for (auto& r : load_store_rows(path)) out.push_back({r.lng, r.lat, std::move(r.desc)});
  return out;
}

std::vector<RoadSegment> load_road_store(const std::string& path) {
  std::vector<RoadSegment> out;
  for (auto& r : load_store_rows(path)) out.push_back({r.lng, r.lat, std::move(r.desc)});
  return out;
}

void save_poi_store(const std::string& path, const std::vector<Poi>& pois) {
  std::vector<StoreRow> rows;
  rows.reserve(pois.size());
  for (const auto& p : pois) rows.push_back({p.lng, p.lat, p.desc});
  save_store_rows(path, rows);
}

void save_road_store(const std::string& path, const std::vector<RoadSegment>& roads) {
  std::vector<StoreRow> rows;
  rows.reserve(roads.size());
  for (const auto& r : roads) rows.push_back({r.lng, r.lat, r.desc});
  save_store_rows(path, rows);
}

}  // namespace transfertraj
