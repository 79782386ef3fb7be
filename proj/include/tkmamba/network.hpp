#pragma once

#include <array>
#include <string>
#include <vector>

#include "tkmamba/blocks.hpp"
#include "tkmamba/module.hpp"
#include "tkmamba/ssm.hpp"

namespace tkm {

struct NetworkConfig {
    std::array<std::size_t, 4> dims{48, 96, 192, 384};
    std::array<std::size_t, 4> depths{1, 1, 1, 1};
    std::size_t in_channels = 1;
    std::size_t classes = 3;
    std::size_t input_size = 96;
    std::size_t stem_kernel = 7;
    std::size_t embed_dim = 512;         // d_c
    std::size_t embed_groups = 8;        // GroupNorm in the F_v path, reduced to a divisor
    std::size_t head_hidden = 8;         // per-class dynamic conv C_dec -> head_hidden -> 1
    std::size_t controller_hidden = 256; // MLP generating the dynamic conv parameters
    MambaConfig mamba;                   // d_model filled per stage
    GrKanConfig kan;

    std::size_t decoder_channels() const { return dims[0]; }
    std::size_t embed_hidden() const { return 2 * dims[3]; }
    /// Dynamic conv parameters per class: w1, b1, w2, b2.
    std::size_t head_params() const { return head_hidden * decoder_channels() + head_hidden + head_hidden + 1; }
};

/// "desk": dims [4,8,16,32], 32^3 input. "paper": dims [48,96,192,384], 96^3.
NetworkConfig network_preset(const std::string& name);

struct StageShapes {
    std::array<Shape, 4> stages;  // encoder stage outputs (pre-downsample)
    Shape stem;
    Shape decoder;
    Shape logits;
    Shape visual_embedding;
};

/// Output shapes implied by the config, from conv arithmetic alone.
StageShapes infer_shapes(const NetworkConfig& config, std::size_t batch);

/// Throws ValidationError unless the config's shapes line up (input divisible
/// by 16, stages halving, positive widths).
void validate_network_config(const NetworkConfig& config);

template <typename T>
struct SegmentationOutput {
    Tensor<T> logits;    // [B,K,D,H,W]
    Tensor<T> features;  // F_v [B,d_c]
    Tensor<T> presence;  // S [B,K], empty unless description embeddings were given

    /// sigmoid(logits) > 0.5
    Tensor<T> masks() const;
};

template <typename T>
struct EncoderOutput {
    Tensor<T> stem;
    std::array<Tensor<T>, 4> stages;  // stages[3] is the bottom feature map
};

/// EGSC -> LN + ToM residual -> LN + GR-KAN residual.
template <typename T>
class KMambaLayer {
public:
    KMambaLayer() = default;
    KMambaLayer(std::size_t channels, const NetworkConfig& config, Rng& rng);

    Tensor<T> forward(const Tensor<T>& z, const ForwardContext& ctx) const;
    void parameters(const std::string& prefix, ParamList<T>& out) const;

    Egsc<T> egsc;
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
    Tom<T> tom;
    GrKan<T> kan;
};

template <typename T>
class TkMamba {
public:
    TkMamba() = default;
    TkMamba(const NetworkConfig& config, Rng& rng);

    const NetworkConfig& config() const { return config_; }

    Tensor<T> stem(const Tensor<T>& x) const;
    EncoderOutput<T> encode(const Tensor<T>& x, const ForwardContext& ctx = {}) const;
    /// Full-resolution decoder features [B,C_dec,D,H,W].
    Tensor<T> decode(const Tensor<T>& x, const EncoderOutput<T>& enc) const;
    /// F_v [B,d_c] from the bottom feature map.
    Tensor<T> visual_embed(const Tensor<T>& bottom) const;
    /// Per-class logits from decoder features and label embeddings E [K,d_c].
    Tensor<T> seg_head(const Tensor<T>& dec, const Tensor<T>& label_embeddings) const;

    /// label_embeddings: Branch-1 E [K,d_c]. description_embeddings: Branch-2
    /// F_t [K,d_c] or null to skip the similarity row.
    SegmentationOutput<T> forward(const Tensor<T>& x, const Tensor<T>& label_embeddings,
                                  const Tensor<T>* description_embeddings, const ForwardContext& ctx = {}) const;

    /// Every learnable tensor with a stable hierarchical name.
    ParamList<T> parameters() const;

    // stem
    Tensor<T> stem_w, stem_b, stem_norm_g, stem_norm_b, stem_alpha;
    // encoder
    std::array<std::vector<KMambaLayer<T>>, 4> stages;
    std::array<Tensor<T>, 3> down_norm_g, down_norm_b, down_w, down_b;
    // decoder: level 3 upsamples the bottom, level 0 reaches full resolution
    ConvBlock<T> skip0;
    std::array<Tensor<T>, 4> up_w, up_b;
    std::array<ConvBlock<T>, 4> dec_a, dec_b;
    // F_v path
    Tensor<T> embed_hidden_w, embed_hidden_b, embed_norm_g, embed_norm_b, embed_out_w, embed_out_b;
    // seg head controller
    Tensor<T> ctrl_w1, ctrl_b1, ctrl_w2, ctrl_b2;

private:
    NetworkConfig config_;
};

}  // namespace tkm
