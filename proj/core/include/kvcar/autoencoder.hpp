#pragma once
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "kvcar/tensor.hpp"

namespace kvcar {

struct AutoencoderConfig {
    int64_t input_dim = 0;  // width of the vectors being compressed
    int64_t hidden = 0;     // first encoder layer width; 0 → ceil((input+latent)/2)
    int64_t latent = 0;     // compressed width
    float leaky_slope = 0.01f;

    int64_t effective_hidden() const;
    void validate() const; // latent < input_dim, hidden ≥ latent
};

// Compresses rows from input_dim to latent and reconstructs them.
//
// Encoder: FC(input→hidden), batchnorm, leaky ReLU, FC(hidden→latent).
// Decoder mirrors it: FC(latent→hidden), batchnorm, leaky ReLU, FC(hidden→input).
//
// Train-mode calls update the batchnorm running statistics; eval-mode calls
// are deterministic and safe to run concurrently.
class Autoencoder {
  public:
    Autoencoder() = default;
    Autoencoder(const AutoencoderConfig& cfg, std::mt19937& gen);

    const AutoencoderConfig& config() const { return cfg_; }

    Tensor encode(const Tensor& x, Mode mode) const; // [n×input] → [n×latent]
    Tensor decode(const Tensor& z, Mode mode) const; // [n×latent] → [n×input]

    // Mean |x − decode(encode(x))|.
    Tensor reconstruction_l1(const Tensor& x, Mode mode) const;

    std::vector<Tensor> parameters();
    void set_trainable(bool value);

    // All tensors including batchnorm running stats, for serialization.
    std::vector<std::pair<std::string, Tensor>> named_tensors();

    Autoencoder clone() const;

    // Test seams: direct access to the layer tensors.
    Tensor& tensor(const std::string& name);
    BatchNormState& encoder_bn() { return enc_bn_; }
    BatchNormState& decoder_bn() { return dec_bn_; }

  private:
    AutoencoderConfig cfg_;
    Tensor enc_w1_, enc_b1_, enc_gamma_, enc_beta_, enc_w2_, enc_b2_;
    Tensor dec_w1_, dec_b1_, dec_gamma_, dec_beta_, dec_w2_, dec_b2_;
    mutable BatchNormState enc_bn_;
    mutable BatchNormState dec_bn_;
};

} // namespace kvcar
