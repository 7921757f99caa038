#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dcn2/support_analysis.hpp"

namespace dcn2 {

namespace {

struct Center {
  double y = 0.0;
  double x = 0.0;
  std::vector<double> color;
};

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }

  std::size_t find(std::size_t a) {
    while (parent_[a] != a) {
      parent_[a] = parent_[parent_[a]];
      a = parent_[a];
    }
    return a;
  }
  // Attaches a's set under b's root.
  void merge_into(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[a] = b;
  }

 private:
  std::vector<std::size_t> parent_;
};

// 4-connected components of equal labels; returns a component id per pixel
// (numbered in scan order of first pixel) and the component count.
std::vector<int> components(const std::vector<int>& labels, std::int64_t h, std::int64_t w, int& count) {
  std::vector<int> comp(labels.size(), -1);
  std::vector<std::int64_t> stack;
  count = 0;
  for (std::int64_t start = 0; start < h * w; ++start) {
    if (comp[static_cast<std::size_t>(start)] >= 0) continue;
    const int id = count++;
    const int lab = labels[static_cast<std::size_t>(start)];
    comp[static_cast<std::size_t>(start)] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::int64_t p = stack.back();
      stack.pop_back();
      const std::int64_t y = p / w, x = p % w;
      const std::int64_t nbr[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& q : nbr) {
        if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
        const auto qi = static_cast<std::size_t>(q[0] * w + q[1]);
        if (comp[qi] < 0 && labels[qi] == lab) {
          comp[qi] = id;
          stack.push_back(static_cast<std::int64_t>(qi));
        }
      }
    }
  }
  return comp;
}

std::vector<int> enforce_connectivity(const std::vector<int>& labels, int num_labels, std::int64_t h,
                                      std::int64_t w) {
  int ncomp = 0;
  const std::vector<int> comp = components(labels, h, w, ncomp);
  const auto nc = static_cast<std::size_t>(ncomp);
  std::vector<std::int64_t> comp_size(nc, 0);
  std::vector<int> comp_label(nc, 0);
  for (std::size_t p = 0; p < labels.size(); ++p) {
    ++comp_size[static_cast<std::size_t>(comp[p])];
    comp_label[static_cast<std::size_t>(comp[p])] = labels[p];
  }
  // The largest component of each label is its main body (first in scan
  // order on ties); every other component is an orphan.
  std::vector<int> main_of(static_cast<std::size_t>(num_labels), -1);
  for (std::size_t c = 0; c < nc; ++c) {
    int& m = main_of[static_cast<std::size_t>(comp_label[c])];
    if (m < 0 || comp_size[c] > comp_size[static_cast<std::size_t>(m)]) m = static_cast<int>(c);
  }
  std::vector<char> orphan(nc, 1);
  for (int m : main_of) {
    if (m >= 0) orphan[static_cast<std::size_t>(m)] = 0;
  }

  // Adjacency between components.
  std::vector<std::vector<std::size_t>> adj(nc);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const auto a = static_cast<std::size_t>(comp[static_cast<std::size_t>(y * w + x)]);
      if (x + 1 < w) {
        const auto b = static_cast<std::size_t>(comp[static_cast<std::size_t>(y * w + x + 1)]);
        if (a != b) adj[a].push_back(b), adj[b].push_back(a);
      }
      if (y + 1 < h) {
        const auto b = static_cast<std::size_t>(comp[static_cast<std::size_t>((y + 1) * w + x)]);
        if (a != b) adj[a].push_back(b), adj[b].push_back(a);
      }
    }
  }

  // Orphans are merged repeatedly until only main bodies are roots. `sizes`
  // and `members` are kept per root.
  UnionFind uf(nc);
  std::vector<std::int64_t> sizes = comp_size;
  std::vector<std::vector<std::size_t>> members(nc);
  for (std::size_t c = 0; c < nc; ++c) members[c] = {c};

  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t c = 0; c < nc; ++c) {
      const std::size_t root = uf.find(c);
      if (root != c || !orphan[root]) continue;
      std::size_t best = root;
      for (std::size_t m : members[root]) {
        for (std::size_t nb : adj[m]) {
          const std::size_t r = uf.find(nb);
          if (r == root) continue;
          if (best == root || sizes[r] > sizes[best] || (sizes[r] == sizes[best] && r < best)) {
            best = r;
          }
        }
      }
      if (best == root) continue;  // single component covering the image
      uf.merge_into(root, best);
      sizes[best] += sizes[root];
      members[best].insert(members[best].end(), members[root].begin(), members[root].end());
      members[root].clear();
      changed = true;
    }
  }

  std::vector<int> relabel(nc, -1);
  int next = 0;
  std::vector<int> out(labels.size());
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const std::size_t r = uf.find(static_cast<std::size_t>(comp[p]));
    if (relabel[r] < 0) relabel[r] = next++;
    out[p] = relabel[r];
  }
  return out;
}

}  // namespace

std::pair<int, int> slic_grid(std::int64_t height, std::int64_t width, int segments) {
  if (segments < 1) throw ArgumentError("segment count must be >= 1");
  if (height < 1 || width < 1) throw ShapeError("cannot segment an empty image");
  if (segments > height * width) throw ArgumentError("more segments requested than pixels");
  int best_nx = 1, best_ny = 1;
  std::int64_t best_gap = std::numeric_limits<std::int64_t>::max();
  double best_skew = std::numeric_limits<double>::infinity();
  const int max_nx = static_cast<int>(std::min<std::int64_t>(width, segments));
  const int max_ny = static_cast<int>(std::min<std::int64_t>(height, segments));
  for (int nx = 1; nx <= max_nx; ++nx) {
    for (int ny = 1; ny <= max_ny; ++ny) {
      const std::int64_t gap = std::llabs(static_cast<std::int64_t>(nx) * ny - segments);
      const double skew = std::abs(std::log((static_cast<double>(width) / nx) / (static_cast<double>(height) / ny)));
      const bool better = gap < best_gap || (gap == best_gap && skew < best_skew - 1e-12) ||
                          (gap == best_gap && std::abs(skew - best_skew) <= 1e-12 && nx > best_nx);
      if (better) {
        best_gap = gap;
        best_skew = skew;
        best_nx = nx;
        best_ny = ny;
      }
    }
  }
  return {best_nx, best_ny};
}

SuperpixelLabeling slic_segment(const Tensor& image, const SlicOptions& opts) {
  const Dims d = image.dims();
  if (d.n < 1 || d.c < 1 || d.h < 1 || d.w < 1) throw ShapeError("cannot segment an empty image " + d.str());
  if (opts.iterations < 0) throw ArgumentError("SLIC iterations must be >= 0");
  if (!(opts.compactness >= 0.0)) throw ArgumentError("SLIC compactness must be >= 0");
  const std::int64_t h = d.h, w = d.w, nch = d.c;
  const auto [nx, ny] = slic_grid(h, w, opts.segments);
  const double s = std::sqrt(static_cast<double>(h * w) / opts.segments);
  const double spatial = opts.compactness / s;

  auto color = [&](std::int64_t y, std::int64_t x, std::int64_t c) {
    return static_cast<double>(image(0, c, std::clamp<std::int64_t>(y, 0, h - 1), std::clamp<std::int64_t>(x, 0, w - 1)));
  };
  auto gradient = [&](std::int64_t y, std::int64_t x) {
    double g = 0.0;
    for (std::int64_t c = 0; c < nch; ++c) {
      const double gx = color(y, x + 1, c) - color(y, x - 1, c);
      const double gy = color(y + 1, x, c) - color(y - 1, x, c);
      g += gx * gx + gy * gy;
    }
    return g;
  };

  std::vector<Center> centers;
  centers.reserve(static_cast<std::size_t>(nx * ny));
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      Center c;
      c.y = (j + 0.5) * static_cast<double>(h) / ny - 0.5;
      c.x = (i + 0.5) * static_cast<double>(w) / nx - 0.5;
      const std::int64_t py = std::clamp<std::int64_t>(std::llround(c.y), 0, h - 1);
      const std::int64_t px = std::clamp<std::int64_t>(std::llround(c.x), 0, w - 1);
      double best = gradient(py, px);
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          const std::int64_t qy = py + dy, qx = px + dx;
          if (qy < 0 || qy >= h || qx < 0 || qx >= w) continue;
          const double g = gradient(qy, qx);
          if (g < best) {
            best = g;
            c.y = static_cast<double>(qy);
            c.x = static_cast<double>(qx);
          }
        }
      }
      c.color.resize(static_cast<std::size_t>(nch));
      const std::int64_t cy = std::clamp<std::int64_t>(std::llround(c.y), 0, h - 1);
      const std::int64_t cx = std::clamp<std::int64_t>(std::llround(c.x), 0, w - 1);
      for (std::int64_t ch = 0; ch < nch; ++ch) c.color[static_cast<std::size_t>(ch)] = color(cy, cx, ch);
      centers.push_back(std::move(c));
    }
  }

  const auto npx = static_cast<std::size_t>(h * w);
  std::vector<int> labels(npx, -1);
  std::vector<double> dist(npx);
  const double ry = std::max(s, static_cast<double>(h) / ny);
  const double rx = std::max(s, static_cast<double>(w) / nx);

  auto distance = [&](const Center& c, std::int64_t y, std::int64_t x) {
    double dc = 0.0;
    for (std::int64_t ch = 0; ch < nch; ++ch) {
      const double v = static_cast<double>(image(0, ch, y, x)) - c.color[static_cast<std::size_t>(ch)];
      dc += v * v;
    }
    const double ds = std::hypot(static_cast<double>(y) - c.y, static_cast<double>(x) - c.x);
    return std::sqrt(dc) + spatial * ds;
  };

  auto assign = [&] {
    std::fill(labels.begin(), labels.end(), -1);
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const Center& c = centers[k];
      const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(c.y - ry)));
      const auto y1 = std::min<std::int64_t>(h - 1, static_cast<std::int64_t>(std::ceil(c.y + ry)));
      const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(c.x - rx)));
      const auto x1 = std::min<std::int64_t>(w - 1, static_cast<std::int64_t>(std::ceil(c.x + rx)));
      for (std::int64_t y = y0; y <= y1; ++y) {
        for (std::int64_t x = x0; x <= x1; ++x) {
          const auto p = static_cast<std::size_t>(y * w + x);
          const double dd = distance(c, y, x);
          if (dd < dist[p]) {
            dist[p] = dd;
            labels[p] = static_cast<int>(k);
          }
        }
      }
    }
    // Pixels outside every search window fall back to the nearest center.
    for (std::size_t p = 0; p < npx; ++p) {
      if (labels[p] >= 0) continue;
      const auto y = static_cast<std::int64_t>(p) / w, x = static_cast<std::int64_t>(p) % w;
      for (std::size_t k = 0; k < centers.size(); ++k) {
        const double dd = distance(centers[k], y, x);
        if (dd < dist[p]) {
          dist[p] = dd;
          labels[p] = static_cast<int>(k);
        }
      }
    }
  };

  auto update = [&] {
    const std::size_t nk = centers.size();
    std::vector<double> sy(nk, 0.0), sx(nk, 0.0), cnt(nk, 0.0);
    std::vector<double> sc(nk * static_cast<std::size_t>(nch), 0.0);
    for (std::size_t p = 0; p < npx; ++p) {
      const auto k = static_cast<std::size_t>(labels[p]);
      const auto y = static_cast<std::int64_t>(p) / w, x = static_cast<std::int64_t>(p) % w;
      sy[k] += static_cast<double>(y);
      sx[k] += static_cast<double>(x);
      cnt[k] += 1.0;
      for (std::int64_t ch = 0; ch < nch; ++ch) {
        sc[k * static_cast<std::size_t>(nch) + static_cast<std::size_t>(ch)] += static_cast<double>(image(0, ch, y, x));
      }
    }
    for (std::size_t k = 0; k < nk; ++k) {
      if (cnt[k] == 0.0) continue;  // empty cluster keeps its previous center
      centers[k].y = sy[k] / cnt[k];
      centers[k].x = sx[k] / cnt[k];
      for (std::int64_t ch = 0; ch < nch; ++ch) {
        centers[k].color[static_cast<std::size_t>(ch)] =
            sc[k * static_cast<std::size_t>(nch) + static_cast<std::size_t>(ch)] / cnt[k];
      }
    }
  };

  assign();
  for (int it = 0; it < opts.iterations; ++it) {
    update();
    assign();
  }

  SuperpixelLabeling out;
  out.height = h;
  out.width = w;
  out.labels = enforce_connectivity(labels, static_cast<int>(centers.size()), h, w);
  out.count = *std::max_element(out.labels.begin(), out.labels.end()) + 1;
  return out;
}

}  // namespace dcn2
