#include "kvcar/autoencoder.hpp"

#include <cmath>

#include "kvcar/error.hpp"

namespace kvcar {

namespace {

// He-style uniform init, bound sqrt(6/fan_in).
Tensor fc_init(int64_t in, int64_t out, std::mt19937& gen) {
    const float bound = std::sqrt(6.0f / static_cast<float>(in));
    return Tensor::rand_uniform({in, out}, gen, -bound, bound);
}

} // namespace

int64_t AutoencoderConfig::effective_hidden() const {
    return hidden > 0 ? hidden : (input_dim + latent + 1) / 2;
}

void AutoencoderConfig::validate() const {
    if (input_dim <= 0 || latent <= 0) throw ConfigError("autoencoder: dimensions must be positive");
    if (latent > input_dim) throw ConfigError("autoencoder: latent must not exceed the input width");
    if (effective_hidden() < latent) throw ConfigError("autoencoder: hidden must be at least latent");
}

Autoencoder::Autoencoder(const AutoencoderConfig& cfg, std::mt19937& gen) : cfg_(cfg) {
    cfg_.validate();
    const int64_t d_in = cfg_.input_dim;
    const int64_t h = cfg_.effective_hidden();
    const int64_t d_lat = cfg_.latent;

    enc_w1_ = fc_init(d_in, h, gen).set_requires_grad(true);
    enc_b1_ = Tensor::zeros({h}).set_requires_grad(true);
    enc_gamma_ = Tensor::full({h}, 1.0f).set_requires_grad(true);
    enc_beta_ = Tensor::zeros({h}).set_requires_grad(true);
    enc_w2_ = fc_init(h, d_lat, gen).set_requires_grad(true);
    enc_b2_ = Tensor::zeros({d_lat}).set_requires_grad(true);
    enc_bn_ = BatchNormState::make(h);

    dec_w1_ = fc_init(d_lat, h, gen).set_requires_grad(true);
    dec_b1_ = Tensor::zeros({h}).set_requires_grad(true);
    dec_gamma_ = Tensor::full({h}, 1.0f).set_requires_grad(true);
    dec_beta_ = Tensor::zeros({h}).set_requires_grad(true);
    dec_w2_ = fc_init(h, d_in, gen).set_requires_grad(true);
    dec_b2_ = Tensor::zeros({d_in}).set_requires_grad(true);
    dec_bn_ = BatchNormState::make(h);
}

Tensor Autoencoder::encode(const Tensor& x, Mode mode) const {
    if (x.ndim() != 2 || x.dim(1) != cfg_.input_dim)
        throw ShapeError("autoencoder encode: input width mismatch");
    Tensor h = add_rows(matmul(x, enc_w1_), enc_b1_);
    h = batchnorm(h, enc_gamma_, enc_beta_, enc_bn_, mode);
    h = leaky_relu(h, cfg_.leaky_slope);
    return add_rows(matmul(h, enc_w2_), enc_b2_);
}

Tensor Autoencoder::decode(const Tensor& z, Mode mode) const {
    if (z.ndim() != 2 || z.dim(1) != cfg_.latent)
        throw ShapeError("autoencoder decode: input width mismatch");
    Tensor h = add_rows(matmul(z, dec_w1_), dec_b1_);
    h = batchnorm(h, dec_gamma_, dec_beta_, dec_bn_, mode);
    h = leaky_relu(h, cfg_.leaky_slope);
    return add_rows(matmul(h, dec_w2_), dec_b2_);
}

Tensor Autoencoder::reconstruction_l1(const Tensor& x, Mode mode) const {
    return l1_loss(x, decode(encode(x, mode), mode));
}

std::vector<Tensor> Autoencoder::parameters() {
    return {enc_w1_, enc_b1_, enc_gamma_, enc_beta_, enc_w2_, enc_b2_,
            dec_w1_, dec_b1_, dec_gamma_, dec_beta_, dec_w2_, dec_b2_};
}

void Autoencoder::set_trainable(bool value) {
    for (auto& p : parameters()) p.set_requires_grad(value);
}

std::vector<std::pair<std::string, Tensor>> Autoencoder::named_tensors() {
    return {
        {"enc.fc1.w", enc_w1_},       {"enc.fc1.b", enc_b1_},
        {"enc.bn.gamma", enc_gamma_}, {"enc.bn.beta", enc_beta_},
        {"enc.bn.mean", enc_bn_.running_mean},
        {"enc.bn.var", enc_bn_.running_var},
        {"enc.fc2.w", enc_w2_},       {"enc.fc2.b", enc_b2_},
        {"dec.fc1.w", dec_w1_},       {"dec.fc1.b", dec_b1_},
        {"dec.bn.gamma", dec_gamma_}, {"dec.bn.beta", dec_beta_},
        {"dec.bn.mean", dec_bn_.running_mean},
        {"dec.bn.var", dec_bn_.running_var},
        {"dec.fc2.w", dec_w2_},       {"dec.fc2.b", dec_b2_},
    };
}

Tensor& Autoencoder::tensor(const std::string& name) {
    if (name == "enc.fc1.w") return enc_w1_;
    if (name == "enc.fc1.b") return enc_b1_;
    if (name == "enc.bn.gamma") return enc_gamma_;
    if (name == "enc.bn.beta") return enc_beta_;
    if (name == "enc.bn.mean") return enc_bn_.running_mean;
    if (name == "enc.bn.var") return enc_bn_.running_var;
    if (name == "enc.fc2.w") return enc_w2_;
    if (name == "enc.fc2.b") return enc_b2_;
    if (name == "dec.fc1.w") return dec_w1_;
    if (name == "dec.fc1.b") return dec_b1_;
    if (name == "dec.bn.gamma") return dec_gamma_;
    if (name == "dec.bn.beta") return dec_beta_;
    if (name == "dec.bn.mean") return dec_bn_.running_mean;
    if (name == "dec.bn.var") return dec_bn_.running_var;
    if (name == "dec.fc2.w") return dec_w2_;
    if (name == "dec.fc2.b") return dec_b2_;
    throw ConfigError("autoencoder: unknown tensor name " + name);
}

Autoencoder Autoencoder::clone() const {
    Autoencoder copy;
    copy.cfg_ = cfg_;
    copy.enc_w1_ = enc_w1_.clone();
    copy.enc_b1_ = enc_b1_.clone();
    copy.enc_gamma_ = enc_gamma_.clone();
    copy.enc_beta_ = enc_beta_.clone();
    copy.enc_w2_ = enc_w2_.clone();
    copy.enc_b2_ = enc_b2_.clone();
    copy.dec_w1_ = dec_w1_.clone();
    copy.dec_b1_ = dec_b1_.clone();
    copy.dec_gamma_ = dec_gamma_.clone();
    copy.dec_beta_ = dec_beta_.clone();
    copy.dec_w2_ = dec_w2_.clone();
    copy.dec_b2_ = dec_b2_.clone();
    copy.enc_bn_ = enc_bn_.clone();
    copy.dec_bn_ = dec_bn_.clone();
    return copy;
}

} // namespace kvcar
