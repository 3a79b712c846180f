#pragma once

#include <cstdint>
#include <string>

namespace v2flow {

// Tokenizer architecture and training-relaxation settings. Defaults are the
// desk-scale configuration; every field is overridable through the key=value
// config surface.
struct TokenizerConfig {
    int image_size = 32;
    int channels = 3;
    int downsample_q = 8;
    int latent_dim = 64;     // grid channel width
    int n_tokens = 16;       // resampled sequence length
    int vocab_size = 1024;   // fixed vocabulary rows
    int vocab_dim = 64;      // fixed vocabulary width
    int codebook_size = 512;
    int resampler_heads = 1;
    double gumbel_tau_start = 1.0;
    double gumbel_tau_floor = 0.1;
    double gumbel_tau_decay = 0.999;  // per-step multiplicative anneal
    double ema_gamma = 0.99;
    double laplace_eps = 1e-5;
    double commit_beta = 0.25;
    bool soft_forward = false;  // skip hard quantization in the training forward
    int patch_size = 8;
    int d_model = 128;
    int enc_blocks = 4;
    int dec_blocks = 4;
    int heads = 4;
    int velocity_layers = 3;
    int velocity_hidden_mult = 4;
    int t_embed_dim = 64;
    double cfg_dropout = 0.1;  // fraction of masked patches trained unconditionally
    uint64_t seed = 0;
};

struct TrainConfig {
    int steps = 1500;
    int batch_size = 8;
    double lr = 3e-4;
    double warmup_frac = 0.03;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
};

enum class SampleMethod { rectified_flow, ddim };

struct SamplerConfig {
    int iters = 8;      // masked-AR iterations
    int ode_steps = 25;
    double omega = 1.5;  // guidance scale
    SampleMethod method = SampleMethod::rectified_flow;
    uint64_t seed = 0;
};

struct PriorConfig {
    int blocks = 4;
    int dim = 128;
    int heads = 4;
    int context = 64;
    int base_size = 8;  // control + class symbols preceding the visual ids
    bool freeze_visual_embed = false;  // keep codebook-initialized rows fixed
    uint64_t seed = 0;
};

}  // namespace v2flow
