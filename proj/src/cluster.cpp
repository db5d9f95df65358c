#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <limits>

#include "json.hpp"
#include "sima/datapipe.hpp"

namespace sima::data {

std::vector<double> ngram_embedding(std::string_view text, std::size_t dims) {
  if (dims == 0) throw Error("embedding needs at least one dimension");
  std::vector<double> v(dims, 0.0);
  std::string padded = " ";
  for (char c : text) padded.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  padded.push_back(' ');
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) {
    v[fnv1a64(std::string_view(padded).substr(i, 3)) % dims] += 1.0;
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0) {
    for (double& x : v) x /= norm;
  }
  return v;
}

double cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error("cosine distance of vectors with different sizes");
  if (a == b) return 0.0;
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 1.0;
  return std::max(0.0, 1.0 - dot / std::sqrt(na * nb));
}

Hierarchy cluster_instructions(const std::vector<std::string>& instructions) {
  const std::size_t n = instructions.size();
  if (n < 2) throw Error("clustering needs at least two instructions");
  Hierarchy h;
  h.items = instructions;

  std::vector<std::vector<double>> emb;
  emb.reserve(n);
  for (const auto& s : instructions) emb.push_back(ngram_embedding(s));

  // Active clusters: id, size and distances to every other active cluster.
  std::vector<std::size_t> id(n), size(n, 1);
  std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    id[i] = i;
    for (std::size_t j = i + 1; j < n; ++j) d[i][j] = d[j][i] = cosine_distance(emb[i], emb[j]);
  }
  std::vector<bool> alive(n, true);

  for (std::size_t step = 0; step + 1 < n; ++step) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!alive[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (alive[j] && d[i][j] < best) {
          best = d[i][j];
          bi = i;
          bj = j;
        }
      }
    }
    h.merges.push_back({id[bi], id[bj], best, size[bi] + size[bj]});
    // Average linkage update, merged cluster kept in slot bi.
    for (std::size_t k = 0; k < n; ++k) {
      if (!alive[k] || k == bi || k == bj) continue;
      double v = (static_cast<double>(size[bi]) * d[bi][k] + static_cast<double>(size[bj]) * d[bj][k]) /
                 static_cast<double>(size[bi] + size[bj]);
      d[bi][k] = d[k][bi] = v;
    }
    size[bi] += size[bj];
    id[bi] = n + step;
    alive[bj] = false;
  }
  return h;
}

std::string Hierarchy::report_json() const {
  const std::size_t n = items.size();
  std::function<nlohmann::ordered_json(std::size_t)> node = [&](std::size_t cid) {
    nlohmann::ordered_json j;
    if (cid < n) {
      j["name"] = items[cid];
      j["size"] = 1;
      return j;
    }
    const Merge& m = merges.at(cid - n);
    j["height"] = m.height;
    j["size"] = m.size;
    j["children"] = nlohmann::ordered_json::array({node(m.a), node(m.b)});
    return j;
  };
  nlohmann::ordered_json root;
  root["format"] = "sima-instruction-clusters";
  root["version"] = 1;
  root["items"] = n;
  root["tree"] = merges.empty() ? (n == 1 ? node(0) : nlohmann::ordered_json()) : node(n + merges.size() - 1);
  return root.dump(2) + "\n";
}

}  // namespace sima::data
