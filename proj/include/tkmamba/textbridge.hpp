#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tkmamba/tensor.hpp"

namespace tkm {

inline constexpr std::size_t kEmbedDim = 512;

struct TextEmbedding {
    std::string name;
    std::string prompt;
    std::vector<double> vector;
    int branch = 1;  // 1: label prompt, 2: long description
};

/// Class embeddings for both branches. Container layout:
/// {"dim":512,"classes":[{"name","prompt","embedding":[...],"branch":1|2}]}
struct TextEmbeddingSet {
    std::size_t dim = kEmbedDim;
    std::vector<TextEmbedding> entries;

    /// Entries of one branch in file order.
    std::vector<const TextEmbedding*> branch(int which) const;
    std::vector<std::string> names(int which) const;
    /// [K, dim] matrix of one branch. Throws if the branch is empty.
    template <typename T>
    Tensor<T> matrix(int which) const;
};

/// Validates dims, finiteness, branch ids and per-branch name uniqueness.
/// Errors name the index of the offending class.
void validate_embeddings(const TextEmbeddingSet& set);

TextEmbeddingSet parse_embeddings(const std::string& json_text);
std::string serialize_embeddings(const TextEmbeddingSet& set);
TextEmbeddingSet load_embeddings(const std::string& path);
void save_embeddings(const TextEmbeddingSet& set, const std::string& path);

/// Deterministic unit vectors seeded by a hash of (name, branch, seed), with
/// pairwise |cos| < 0.5 inside each branch enforced by rejection.
TextEmbeddingSet synth_embeddings(const std::vector<std::string>& class_names, std::uint64_t seed,
                                  std::size_t dim = kEmbedDim);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// S = normalize(F_v) normalize(F_t)^T / temperature, F_v [B,d], F_t [K,d].
template <typename T>
Tensor<T> similarity_matrix(const Tensor<T>& fv, const Tensor<T>& ft, double temperature = 1.0);

/// Mean BCE-with-logits of S against presence labels Y.
template <typename T>
Tensor<T> contrastive_loss(const Tensor<T>& S, const Tensor<T>& Y);

/// Y[b,k] = 1 when the mask of class k in sample b is non-empty. masks [B,K,...].
template <typename T>
Tensor<T> presence_labels(const Tensor<T>& masks);

struct ChunkAverage {
    std::vector<double> vector;
    bool degenerate = false;  // mean has zero norm
};

/// Arithmetic mean of chunk embeddings. Throws on an empty list or ragged
/// dims; warns on stderr and sets `degenerate` when the mean vanishes.
ChunkAverage branch2_chunk_average(const std::vector<std::vector<double>>& chunks);

}  // namespace tkm
