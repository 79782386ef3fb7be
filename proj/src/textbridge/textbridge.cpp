#include "tkmamba/textbridge.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "tkmamba/ops.hpp"
#include "tkmamba/random.hpp"

namespace tkm {

using nlohmann::json;

std::vector<const TextEmbedding*> TextEmbeddingSet::branch(int which) const {
    std::vector<const TextEmbedding*> out;
    for (const auto& e : entries)
        if (e.branch == which) out.push_back(&e);
    return out;
}

std::vector<std::string> TextEmbeddingSet::names(int which) const {
    std::vector<std::string> out;
    for (const auto* e : branch(which)) out.push_back(e->name);
    return out;
}

template <typename T>
Tensor<T> TextEmbeddingSet::matrix(int which) const {
    const auto rows = branch(which);
    if (rows.empty()) throw ValidationError("embedding set has no branch-" + std::to_string(which) + " entries");
    std::vector<T> data;
    data.reserve(rows.size() * dim);
    for (const auto* e : rows)
        for (double v : e->vector) data.push_back(static_cast<T>(v));
    return Tensor<T>::from_data({rows.size(), dim}, std::move(data));
}

void validate_embeddings(const TextEmbeddingSet& set) {
    if (set.dim == 0) throw ValidationError("embeddings: dim must be positive");
    std::set<std::pair<int, std::string>> seen;
    for (std::size_t i = 0; i < set.entries.size(); ++i) {
        const auto& e = set.entries[i];
        const std::string where = "embeddings: class " + std::to_string(i) + " ('" + e.name + "')";
        if (e.name.empty()) throw ValidationError(where + ": empty name");
        if (e.branch != 1 && e.branch != 2) throw ValidationError(where + ": branch must be 1 or 2");
        if (e.vector.size() != set.dim) {
            throw ValidationError(where + ": embedding has " + std::to_string(e.vector.size()) + " entries, expected " +
                                  std::to_string(set.dim));
        }
        for (double v : e.vector)
            if (!std::isfinite(v)) throw ValidationError(where + ": non-finite entry");
        if (!seen.insert({e.branch, e.name}).second) {
            throw ValidationError(where + ": duplicate name in branch " + std::to_string(e.branch));
        }
    }
}

TextEmbeddingSet parse_embeddings(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ValidationError(std::string("embeddings: malformed JSON: ") + e.what());
    }
    TextEmbeddingSet set;
    try {
        set.dim = doc.at("dim").get<std::size_t>();
        const auto& classes = doc.at("classes");
        if (!classes.is_array()) throw ValidationError("embeddings: \"classes\" must be an array");
        for (std::size_t i = 0; i < classes.size(); ++i) {
            const auto& c = classes[i];
            TextEmbedding e;
            try {
                e.name = c.at("name").get<std::string>();
                e.prompt = c.value("prompt", std::string());
                e.vector = c.at("embedding").get<std::vector<double>>();
                e.branch = c.value("branch", 1);
            } catch (const json::exception& ex) {
                throw ValidationError("embeddings: class " + std::to_string(i) + ": " + ex.what());
            }
            set.entries.push_back(std::move(e));
        }
    } catch (const json::exception& ex) {
        throw ValidationError(std::string("embeddings: ") + ex.what());
    }
    validate_embeddings(set);
    return set;
}

std::string serialize_embeddings(const TextEmbeddingSet& set) {
    json doc;
    doc["dim"] = set.dim;
    doc["classes"] = json::array();
    for (const auto& e : set.entries) {
        doc["classes"].push_back({{"name", e.name}, {"prompt", e.prompt}, {"embedding", e.vector}, {"branch", e.branch}});
    }
    return doc.dump();
}

TextEmbeddingSet load_embeddings(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open embeddings file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_embeddings(ss.str());
}

void save_embeddings(const TextEmbeddingSet& set, const std::string& path) {
    validate_embeddings(set);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write embeddings file " + path);
    out << serialize_embeddings(set) << "\n";
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr int kMaxSynthAttempts = 1000;

}  // namespace

TextEmbeddingSet synth_embeddings(const std::vector<std::string>& class_names, std::uint64_t seed, std::size_t dim) {
    if (dim == 0) throw ValidationError("synth_embeddings: dim must be positive");
    TextEmbeddingSet set;
    set.dim = dim;
    for (int branch : {1, 2}) {
        std::vector<std::vector<double>> accepted;
        for (const auto& name : class_names) {
            const std::uint64_t base = mix_seed(mix_seed(seed, fnv1a(name)), static_cast<std::uint64_t>(branch));
            std::vector<double> v(dim);
            bool ok = false;
            for (int attempt = 0; attempt < kMaxSynthAttempts && !ok; ++attempt) {
                Rng rng(mix_seed(base, static_cast<std::uint64_t>(attempt)));
                double ss = 0;
                for (auto& x : v) {
                    x = rng.normal();
                    ss += x * x;
                }
                const double n = std::sqrt(ss);
                for (auto& x : v) x /= n;
                ok = true;
                for (const auto& other : accepted) {
                    if (std::abs(cosine_similarity(v, other)) >= 0.5) {
                        ok = false;
                        break;
                    }
                }
            }
            if (!ok) {
                throw ValidationError("synth_embeddings: cannot keep |cos| < 0.5 for " +
                                      std::to_string(class_names.size()) + " classes in " + std::to_string(dim) +
                                      " dimensions");
            }
            accepted.push_back(v);
            TextEmbedding e;
            e.name = name;
            e.prompt = branch == 1 ? "A photo of a " + name : "synthetic description of " + name;
            e.vector = v;
            e.branch = branch;
            set.entries.push_back(std::move(e));
        }
    }
    validate_embeddings(set);
    return set;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw ValidationError("cosine_similarity: zero vector");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

template <typename T>
Tensor<T> similarity_matrix(const Tensor<T>& fv, const Tensor<T>& ft, double temperature) {
    if (fv.ndim() != 2 || ft.ndim() != 2 || fv.dim(1) != ft.dim(1)) {
        throw ShapeError("similarity_matrix: expected [B,d] and [K,d], got " + shape_str(fv.shape()) + " and " +
                         shape_str(ft.shape()));
    }
    if (!(temperature > 0.0)) throw ValidationError("similarity_matrix: temperature must be positive");
    auto s = matmul(l2_normalize(fv), permute(l2_normalize(ft), {1, 0}));
    return temperature == 1.0 ? s : mul_scalar(s, static_cast<T>(1.0 / temperature));
}

template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& S, const Tensor<T>& Y) {
    return bce_with_logits(S, Y);
}

template <typename T>
Tensor<T> presence_labels(const Tensor<T>& masks) {
    if (masks.ndim() < 2) throw ShapeError("presence_labels: expected [B,K,...]");
    const std::size_t B = masks.dim(0), K = masks.dim(1);
    const std::size_t per = masks.numel() / (B * K);
    std::vector<T> y(B * K, T(0));
    for (std::size_t i = 0; i < B * K; ++i)
        for (std::size_t j = 0; j < per; ++j)
            if (masks.at(i * per + j) != T(0)) {
                y[i] = T(1);
                break;
            }
    return Tensor<T>::from_data({B, K}, std::move(y));
}

ChunkAverage branch2_chunk_average(const std::vector<std::vector<double>>& chunks) {
    if (chunks.empty()) throw ValidationError("branch2_chunk_average: no chunk embeddings");
    ChunkAverage out;
    out.vector.assign(chunks[0].size(), 0.0);
    for (const auto& c : chunks) {
        if (c.size() != out.vector.size()) throw ShapeError("branch2_chunk_average: chunks differ in length");
        for (std::size_t i = 0; i < c.size(); ++i) out.vector[i] += c[i];
    }
    double ss = 0;
    for (auto& v : out.vector) {
        v /= static_cast<double>(chunks.size());
        ss += v * v;
    }
    if (ss == 0.0) {
        out.degenerate = true;
        std::cerr << "warning: chunk average has zero norm\n";
    }
    return out;
}

#define TKM_INSTANTIATE(T)                                                              \
    template Tensor<T> TextEmbeddingSet::matrix<T>(int) const;                          \
    template Tensor<T> similarity_matrix(const Tensor<T>&, const Tensor<T>&, double); \
    template Tensor<T> contrastive_loss(const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> presence_labels(const Tensor<T>&);

TKM_INSTANTIATE(float)
TKM_INSTANTIATE(double)
#undef TKM_INSTANTIATE

}  // namespace tkm
