#pragma once

#include <array>
#include <map>
#include <numeric>
#include <set>
#include <queue>
#include <random>

#include "dgm/linalg.hpp"
#include "dgm/tensor_io.hpp"

namespace dgm {

/// Symmetric 0/1 region adjacency over 4-connected pixel boundaries.
struct RegionAdjacency {
  std::size_t num_regions = 0;
  std::vector<std::vector<std::size_t>> neighbors;  // sorted, no self entries

  bool connected(std::size_t a, std::size_t b) const {
    return std::binary_search(neighbors[a].begin(), neighbors[a].end(), b);
  }
  std::size_t edge_count() const {
    std::size_t n = 0;
    for (const auto& v : neighbors) n += v.size();
    return n / 2;
  }
  template <class T>
  Matrix<T> dense() const {
    Matrix<T> m(num_regions, num_regions);
    for (std::size_t a = 0; a < num_regions; ++a)
      for (auto b : neighbors[a]) m(a, b) = T(1);
    return m;
  }
};

inline RegionAdjacency build_rag(const SuperpixelMap& sp) {
  std::vector<std::vector<char>> seen(sp.num_regions, std::vector<char>(sp.num_regions, 0));
  auto link = [&](std::int32_t a, std::int32_t b) {
    if (a == b) return;
    seen[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = 1;
    seen[static_cast<std::size_t>(b)][static_cast<std::size_t>(a)] = 1;
  };
  for (std::size_t y = 0; y < sp.height; ++y)
    for (std::size_t x = 0; x < sp.width; ++x) {
      if (x + 1 < sp.width) link(sp.at(y, x), sp.at(y, x + 1));
      if (y + 1 < sp.height) link(sp.at(y, x), sp.at(y + 1, x));
    }
  RegionAdjacency rag;
  rag.num_regions = sp.num_regions;
  rag.neighbors.resize(sp.num_regions);
  for (std::size_t a = 0; a < sp.num_regions; ++a)
    for (std::size_t b = 0; b < sp.num_regions; ++b)
      if (seen[a][b]) rag.neighbors[a].push_back(b);
  return rag;
}

/// Nearest-neighbour source index for resampling a length-`src` axis to `dst`.
inline std::size_t nearest_source(std::size_t i, std::size_t dst, std::size_t src) {
  const double s = (static_cast<double>(i) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5;
  const double r = std::round(s);
  if (r <= 0) return 0;
  return std::min(static_cast<std::size_t>(r), src - 1);
}

inline LabelGrid downsample_labels(const LabelGrid& g, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) throw Error(ErrorCode::ZeroTargetSize, "target size must be positive");
  if (h > g.height || w > g.width) throw Error(ErrorCode::ShapeMismatch, "downsample target larger than source");
  LabelGrid out{h, w, std::vector<std::int32_t>(h * w)};
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = nearest_source(y, h, g.height);
    for (std::size_t x = 0; x < w; ++x) out.labels[y * w + x] = g.at(sy, nearest_source(x, w, g.width));
  }
  return out;
}

inline LabelGrid downsample_labels(const SuperpixelMap& sp, std::size_t h, std::size_t w) {
  return downsample_labels(sp.grid(), h, w);
}

template <class T>
struct PooledFeatures {
  Matrix<T> features;               // N x C
  std::vector<std::size_t> counts;  // pixels per region at the pooled resolution; 0 => centroid fallback
};

template <class T>
PooledFeatures<T> superpixel_pool(const FeatureMap<T>& f, const SuperpixelMap& sp) {
  const LabelGrid g = downsample_labels(sp, f.height, f.width);
  const std::size_t n = sp.num_regions, c = f.channels, hw = f.height * f.width;
  PooledFeatures<T> out{Matrix<T>(n, c), std::vector<std::size_t>(n, 0)};
  for (std::size_t p = 0; p < hw; ++p) {
    const auto r = static_cast<std::size_t>(g.labels[p]);
    ++out.counts[r];
    for (std::size_t ch = 0; ch < c; ++ch) out.features(r, ch) += f.data(ch, p);
  }
  for (std::size_t r = 0; r < n; ++r) {
    if (out.counts[r] > 0) {
      for (std::size_t ch = 0; ch < c; ++ch) out.features(r, ch) /= static_cast<T>(out.counts[r]);
      continue;
    }
    double cy = 0, cx = 0;
    for (auto p : sp.region_pixels[r]) {
      cy += static_cast<double>(p / sp.width);
      cx += static_cast<double>(p % sp.width);
    }
    cy /= static_cast<double>(sp.region_pixels[r].size());
    cx /= static_cast<double>(sp.region_pixels[r].size());
    auto map_axis = [](double v, std::size_t full, std::size_t small) {
      const double s = (v + 0.5) * static_cast<double>(small) / static_cast<double>(full) - 0.5;
      const double rr = std::round(s);
      if (rr <= 0) return std::size_t{0};
      return std::min(static_cast<std::size_t>(rr), small - 1);
    };
    const std::size_t y = map_axis(cy, sp.height, f.height);
    const std::size_t x = map_axis(cx, sp.width, f.width);
    for (std::size_t ch = 0; ch < c; ++ch) out.features(r, ch) = f.at(ch, y, x);
  }
  return out;
}

/// Copies one row per region to every pixel of that region at the grid's resolution.
template <class T>
FeatureMap<T> broadcast_regions(const Matrix<T>& rows, const LabelGrid& g) {
  FeatureMap<T> f(rows.cols(), g.height, g.width);
  for (std::size_t p = 0; p < g.labels.size(); ++p)
    for (std::size_t c = 0; c < rows.cols(); ++c) f.data(c, p) = rows(static_cast<std::size_t>(g.labels[p]), c);
  return f;
}

/// Relabels so that labels are contiguous, ordered by first appearance of the
/// old label value (ascending).
inline SuperpixelMap compact_labels(std::size_t height, std::size_t width, std::vector<std::int32_t> labels,
                                    std::size_t max_regions = std::numeric_limits<std::size_t>::max()) {
  std::map<std::int32_t, std::int32_t> remap;
  for (auto v : labels) remap.emplace(v, 0);
  std::int32_t next = 0;
  for (auto& [k, v] : remap) v = next++;
  for (auto& v : labels) v = remap[v];
  return validate_label_map(height, width, std::move(labels), max_regions);
}

/// Merges adjacent regions with the closest mean features until at most
/// `max_regions` remain. Ties go to the lexicographically smallest
/// (min-label, max-label) pair; a merged region keeps the smaller label.
template <class T>
SuperpixelMap greedy_merge(const SuperpixelMap& sp, const FeatureMap<T>& f, std::size_t max_regions) {
  if (max_regions < 1) throw Error(ErrorCode::InvalidConfig, "max_regions must be >= 1");
  if (sp.num_regions <= max_regions) return sp;

  const std::size_t n = sp.num_regions, c = f.channels;
  const PooledFeatures<T> pooled = superpixel_pool(f, sp);
  // Running sums weighted by pooled pixel counts; empty regions carry their
  // fallback sample with unit weight.
  std::vector<std::vector<double>> sums(n, std::vector<double>(c));
  std::vector<double> weight(n);
  for (std::size_t r = 0; r < n; ++r) {
    weight[r] = pooled.counts[r] > 0 ? static_cast<double>(pooled.counts[r]) : 1.0;
    for (std::size_t k = 0; k < c; ++k) sums[r][k] = static_cast<double>(pooled.features(r, k)) * weight[r];
  }
  const RegionAdjacency rag = build_rag(sp);
  std::vector<std::set<std::size_t>> adj(n);
  for (std::size_t a = 0; a < n; ++a) adj[a].insert(rag.neighbors[a].begin(), rag.neighbors[a].end());
  std::vector<std::size_t> owner(n);
  std::iota(owner.begin(), owner.end(), 0);
  std::vector<char> alive(n, 1);

  auto dist2 = [&](std::size_t a, std::size_t b) {
    double s = 0;
    for (std::size_t k = 0; k < c; ++k) {
      const double d = sums[a][k] / weight[a] - sums[b][k] / weight[b];
      s += d * d;
    }
    return s;
  };

  std::size_t count = n;
  while (count > max_regions) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t ba = n, bb = n;
    for (std::size_t a = 0; a < n; ++a) {
      if (!alive[a]) continue;
      for (auto b : adj[a]) {
        if (b <= a) continue;
        const double d = dist2(a, b);
        if (d < best) {  // strict: earlier (a, b) wins ties
          best = d;
          ba = a;
          bb = b;
        }
      }
    }
    if (ba == n) break;  // disconnected remainder: nothing adjacent left to merge
    for (std::size_t k = 0; k < c; ++k) sums[ba][k] += sums[bb][k];
    weight[ba] += weight[bb];
    alive[bb] = 0;
    for (auto nb : adj[bb]) {
      adj[nb].erase(bb);
      if (nb != ba) {
        adj[nb].insert(ba);
        adj[ba].insert(nb);
      }
    }
    adj[bb].clear();
    adj[ba].erase(ba);
    for (auto& o : owner)
      if (o == bb) o = ba;
    --count;
  }
  std::vector<std::int32_t> labels(sp.labels.size());
  for (std::size_t p = 0; p < labels.size(); ++p)
    labels[p] = static_cast<std::int32_t>(owner[static_cast<std::size_t>(sp.labels[p])]);
  return compact_labels(sp.height, sp.width, std::move(labels));
}

/// Grid-initialised k-means over (r, g, b, lambda*x, lambda*y) followed by a
/// connectivity pass. Fallback when no external label map is provided.
inline SuperpixelMap generate_superpixels(const Tensor& image, std::size_t target_count, std::uint64_t seed,
                                          std::size_t iterations = 10) {
  if (image.dtype() != DType::f32 || image.shape.size() != 3 || image.shape[0] != 3)
    throw Error(ErrorCode::ShapeMismatch, "image must be a 3 x H x W f32 tensor");
  const std::size_t h = image.shape[1], w = image.shape[2], hw = h * w;
  if (target_count < 1) throw Error(ErrorCode::InvalidConfig, "target_count must be >= 1");
  if (target_count > hw) throw Error(ErrorCode::TargetCountExceedsPixels, "more superpixels than pixels");

  const double step = std::sqrt(static_cast<double>(hw) / static_cast<double>(target_count));
  const double lambda = 0.5 / step;
  std::size_t nx = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(target_count) * static_cast<double>(w) /
                                                        static_cast<double>(h)))));
  nx = std::min(nx, std::min(w, target_count));
  std::size_t ny = std::min(h, (target_count + nx - 1) / nx);
  while (nx * ny < target_count) ++nx;  // only reachable when ny hit h

  const auto& px = image.f32();
  auto feature = [&](std::size_t p, std::array<double, 5>& v) {
    for (std::size_t ch = 0; ch < 3; ++ch) v[ch] = px[ch * hw + p];
    v[3] = lambda * static_cast<double>(p % w);
    v[4] = lambda * static_cast<double>(p / w);
  };

  std::vector<std::array<double, 5>> centers;
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) {
      const auto cx = std::min(w - 1, static_cast<std::size_t>((static_cast<double>(i) + 0.5) * static_cast<double>(w) / static_cast<double>(nx)));
      const auto cy = std::min(h - 1, static_cast<std::size_t>((static_cast<double>(j) + 0.5) * static_cast<double>(h) / static_cast<double>(ny)));
      std::array<double, 5> v{};
      feature(cy * w + cx, v);
      centers.push_back(v);
    }
  if (centers.size() > target_count) {
    // Surplus grid cells: keep a seeded subset, preserving grid order.
    std::vector<std::size_t> idx(centers.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<std::size_t> keep;
    std::mt19937_64 rng(seed);
    std::sample(idx.begin(), idx.end(), std::back_inserter(keep), target_count, rng);
    std::vector<std::array<double, 5>> kept;
    for (auto k : keep) kept.push_back(centers[k]);
    centers = std::move(kept);
  }

  const std::size_t k = centers.size();
  std::vector<std::int32_t> assign(hw, 0);
  std::array<double, 5> v{};
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t p = 0; p < hw; ++p) {
      feature(p, v);
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t j = 0; j < k; ++j) {
        double d = 0;
        for (std::size_t q = 0; q < 5; ++q) d += (v[q] - centers[j][q]) * (v[q] - centers[j][q]);
        if (d < best) {
          best = d;
          arg = j;
        }
      }
      assign[p] = static_cast<std::int32_t>(arg);
    }
    std::vector<std::array<double, 5>> acc(k, std::array<double, 5>{});
    std::vector<std::size_t> cnt(k, 0);
    for (std::size_t p = 0; p < hw; ++p) {
      feature(p, v);
      const auto j = static_cast<std::size_t>(assign[p]);
      for (std::size_t q = 0; q < 5; ++q) acc[j][q] += v[q];
      ++cnt[j];
    }
    for (std::size_t j = 0; j < k; ++j)
      if (cnt[j] > 0)
        for (std::size_t q = 0; q < 5; ++q) centers[j][q] = acc[j][q] / static_cast<double>(cnt[j]);
  }

  // Connectivity: each label keeps its largest 4-connected component; other
  // fragments join the adjacent component whose centre is nearest in 5-space.
  std::vector<std::int32_t> comp(hw, -1);
  std::vector<std::size_t> comp_size;
  std::vector<std::int32_t> comp_label;
  for (std::size_t s = 0; s < hw; ++s) {
    if (comp[s] >= 0) continue;
    const auto id = static_cast<std::int32_t>(comp_size.size());
    std::size_t size = 0;
    std::queue<std::size_t> q;
    q.push(s);
    comp[s] = id;
    while (!q.empty()) {
      const std::size_t p = q.front();
      q.pop();
      ++size;
      const std::size_t y = p / w, x = p % w;
      const std::size_t nbrs[4] = {x > 0 ? p - 1 : hw, x + 1 < w ? p + 1 : hw, y > 0 ? p - w : hw,
                                   y + 1 < h ? p + w : hw};
      for (auto nb : nbrs)
        if (nb < hw && comp[nb] < 0 && assign[nb] == assign[p]) {
          comp[nb] = id;
          q.push(nb);
        }
    }
    comp_size.push_back(size);
    comp_label.push_back(assign[s]);
  }
  const std::size_t ncomp = comp_size.size();
  std::vector<std::size_t> largest(k, ncomp);
  for (std::size_t ci = 0; ci < ncomp; ++ci) {
    auto& l = largest[static_cast<std::size_t>(comp_label[ci])];
    if (l == ncomp || comp_size[ci] > comp_size[l]) l = ci;
  }
  std::vector<char> is_main(ncomp, 0);
  for (std::size_t j = 0; j < k; ++j)
    if (largest[j] < ncomp) is_main[largest[j]] = 1;

  // Repeatedly absorb fragments that touch a main component, in component order.
  std::vector<std::int32_t> final_label(ncomp, -1);
  for (std::size_t ci = 0; ci < ncomp; ++ci)
    if (is_main[ci]) final_label[ci] = comp_label[ci];
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<std::set<std::int32_t>> touching(ncomp);
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t y = p / w, x = p % w;
      const auto a = static_cast<std::size_t>(comp[p]);
      if (final_label[a] >= 0) continue;
      const std::size_t nbrs[4] = {x > 0 ? p - 1 : hw, x + 1 < w ? p + 1 : hw, y > 0 ? p - w : hw,
                                   y + 1 < h ? p + w : hw};
      for (auto nb : nbrs)
        if (nb < hw && final_label[static_cast<std::size_t>(comp[nb])] >= 0)
          touching[a].insert(final_label[static_cast<std::size_t>(comp[nb])]);
    }
    for (std::size_t ci = 0; ci < ncomp; ++ci) {
      if (final_label[ci] >= 0 || touching[ci].empty()) continue;
      const auto& own = centers[static_cast<std::size_t>(comp_label[ci])];
      double best = std::numeric_limits<double>::infinity();
      std::int32_t arg = -1;
      for (auto lab : touching[ci]) {
        const auto& o = centers[static_cast<std::size_t>(lab)];
        double d = 0;
        for (std::size_t q = 0; q < 5; ++q) d += (own[q] - o[q]) * (own[q] - o[q]);
        if (d < best) {
          best = d;
          arg = lab;
        }
      }
      final_label[ci] = arg;
      changed = true;
    }
  }
  std::vector<std::int32_t> labels(hw);
  for (std::size_t p = 0; p < hw; ++p) labels[p] = final_label[static_cast<std::size_t>(comp[p])];
  return compact_labels(h, w, std::move(labels));
}

}  // namespace dgm
