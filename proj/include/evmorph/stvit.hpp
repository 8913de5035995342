#pragma once

// Spatio-temporal vision transformer for event frames.
//
//   frame -> shifted patch tokens -> LN -> linear -> [CLS; patches] + pos
//         -> spatial blocks (locality self-attention) -> spatial CLS
//   [temporal CLS; spatial CLS per frame] + pos -> temporal blocks
//         -> temporal CLS -> LN -> linear -> class logits
//         -> per-frame tokens -> linear(128) -> ReLU -> linear(K) -> alpha
//
// Blocks are pre-norm: x += attn(LN(x)); x += mlp(LN(x)).

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "evmorph/autodiff.hpp"
#include "evmorph/binary_io.hpp"
#include "evmorph/error.hpp"
#include "evmorph/events.hpp"
#include "json.hpp"

namespace evmorph {

/// Added to masked attention scores before the softmax.
inline constexpr double kMaskedScore = -1e9;

struct ModelConfig {
    int image_size = 64;
    int in_channels = 1;
    int patch_size = 8;
    int embed_dim = 128;
    int spatial_depth = 6;
    int temporal_depth = 4;
    int heads = 4;
    int mlp_ratio = 2;
    int num_classes = 24;
    int alpha_dim = 32;
    int seq_len = 75;
    int regression_hidden = 128;

    int patches_per_side() const { return image_size / patch_size; }
    int num_patches() const { return patches_per_side() * patches_per_side(); }
    int token_dim() const { return 5 * in_channels * patch_size * patch_size; }
    int head_dim() const { return embed_dim / heads; }

    std::vector<std::string> validate() const {
        std::vector<std::string> e;
        auto positive = [&](int v, const char* name) {
            if (v < 1) e.push_back(std::string("model.") + name + " must be >= 1");
        };
        positive(image_size, "image_size");
        positive(in_channels, "in_channels");
        positive(patch_size, "patch_size");
        positive(embed_dim, "embed_dim");
        positive(heads, "heads");
        positive(mlp_ratio, "mlp_ratio");
        positive(alpha_dim, "alpha_dim");
        positive(seq_len, "seq_len");
        positive(regression_hidden, "regression_hidden");
        if (num_classes < 2) e.emplace_back("model.num_classes must be >= 2");
        if (spatial_depth < 0) e.emplace_back("model.spatial_depth must be >= 0");
        if (temporal_depth < 0) e.emplace_back("model.temporal_depth must be >= 0");
        if (patch_size >= 1 && image_size % patch_size != 0) e.emplace_back("model.image_size must be divisible by model.patch_size");
        if (heads >= 1 && embed_dim % heads != 0) e.emplace_back("model.embed_dim must be divisible by model.heads");
        return e;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"image_size", c.image_size},         {"in_channels", c.in_channels},
                       {"patch_size", c.patch_size},         {"embed_dim", c.embed_dim},
                       {"spatial_depth", c.spatial_depth},   {"temporal_depth", c.temporal_depth},
                       {"heads", c.heads},                   {"mlp_ratio", c.mlp_ratio},
                       {"num_classes", c.num_classes},       {"alpha_dim", c.alpha_dim},
                       {"seq_len", c.seq_len},               {"regression_hidden", c.regression_hidden}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    const ModelConfig d;
    c.image_size = j.value("image_size", d.image_size);
    c.in_channels = j.value("in_channels", d.in_channels);
    c.patch_size = j.value("patch_size", d.patch_size);
    c.embed_dim = j.value("embed_dim", d.embed_dim);
    c.spatial_depth = j.value("spatial_depth", d.spatial_depth);
    c.temporal_depth = j.value("temporal_depth", d.temporal_depth);
    c.heads = j.value("heads", d.heads);
    c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.alpha_dim = j.value("alpha_dim", d.alpha_dim);
    c.seq_len = j.value("seq_len", d.seq_len);
    c.regression_hidden = j.value("regression_hidden", d.regression_hidden);
}

// ---- shifted patch tokenization ------------------------------------------------

/// Copy of `image` whose content moves by (dy, dx); exposed borders are zero.
inline Image shift_image(const Image& image, int dy, int dx) {
    Image out(image.height, image.width, image.channels, 0.0f);
    for (int y = 0; y < image.height; ++y) {
        const int sy = y - dy;
        if (sy < 0 || sy >= image.height) continue;
        for (int x = 0; x < image.width; ++x) {
            const int sx = x - dx;
            if (sx < 0 || sx >= image.width) continue;
            for (int c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(sy, sx, c);
        }
    }
    return out;
}

/// Channel-concatenates the image with four diagonal shifts of p/2 pixels in the order
/// [x, left-up, right-up, left-down, right-down], then cuts non-overlapping p x p patches.
///
/// Returns (H/p * W/p) x (5 C p^2). Patches are row-major over the grid; inside a
/// token the feature index is ((py * p + px) * 5 + group) * C + channel.
inline Matrix shifted_patch_tokenize(const Image& image, int patch_size) {
    const int p = patch_size;
    if (p < 1 || image.height % p != 0 || image.width % p != 0) {
        throw InvalidArgument("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                              " is not divisible into " + std::to_string(p) + "-pixel patches");
    }
    const int s = p / 2;
    const Image shifted[5] = {image, shift_image(image, -s, -s), shift_image(image, -s, s), shift_image(image, s, -s),
                              shift_image(image, s, s)};
    const int C = image.channels;
    const int gw = image.width / p;
    const int gh = image.height / p;
    Matrix tokens(gh * gw, 5 * C * p * p);
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const int row = gy * gw + gx;
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int g = 0; g < 5; ++g)
                        for (int c = 0; c < C; ++c)
                            tokens(row, ((py * p + px) * 5 + g) * C + c) = shifted[g].at(gy * p + py, gx * p + px, c);
        }
    }
    return tokens;
}

// ---- attention ----------------------------------------------------------------

/// softmax(q k^T / temperature) with the diagonal set to a large negative score when
/// `mask_diagonal` is on. Rows sum to one.
inline Matrix lsa_weights(const Matrix& q, const Matrix& k, double temperature, bool mask_diagonal) {
    if (q.rows() != k.rows() || q.cols() != k.cols()) throw ShapeError("query/key shapes differ");
    if (!(temperature > 0.0)) throw InvalidArgument("temperature must be positive");
    if (mask_diagonal && q.rows() < 2) throw DegenerateDataError("diagonal masking needs at least two tokens");
    Matrix scores = q * k.transpose() / temperature;
    if (mask_diagonal) scores.diagonal().setConstant(kMaskedScore);
    return ad::softmax_rows_value(scores);
}

inline Matrix lsa_attention(const Matrix& q, const Matrix& k, const Matrix& v, double temperature, bool mask_diagonal) {
    if (v.rows() != k.rows()) throw ShapeError("value/key token counts differ");
    return lsa_weights(q, k, temperature, mask_diagonal) * v;
}

/// Attention maps captured during a forward pass, for inspection and tests.
struct AttentionTrace {
    std::vector<Matrix> weights;
};

struct BlockOptions {
    int heads = 1;
    /// Diagonal masking plus a learned per-layer temperature; otherwise fixed sqrt(d_head).
    bool locality = true;
};

inline std::string block_prefix(const std::string& stage, int index) {
    return stage + ".block" + std::to_string(index) + ".";
}

inline Matrix init_weight(std::mt19937_64& rng, int fan_in, int fan_out) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)));
    Matrix w(fan_in, fan_out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
    return w;
}

inline Matrix init_embedding(std::mt19937_64& rng, int rows, int cols) {
    std::normal_distribution<double> dist(0.0, 0.02);
    Matrix w(rows, cols);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
    return w;
}

inline void add_layer_norm(ad::Parameters& p, const std::string& prefix, int dim) {
    p.add(prefix + "gamma", Matrix::Ones(1, dim));
    p.add(prefix + "beta", Matrix::Zero(1, dim));
}

inline void add_linear(ad::Parameters& p, std::mt19937_64& rng, const std::string& prefix, int in, int out) {
    p.add(prefix + "weight", init_weight(rng, in, out));
    p.add(prefix + "bias", Matrix::Zero(1, out));
}

inline void add_block(ad::Parameters& p, std::mt19937_64& rng, const std::string& prefix, int dim, int mlp_ratio,
                      const BlockOptions& opt) {
    add_layer_norm(p, prefix + "norm1.", dim);
    p.add(prefix + "attn.qkv.weight", init_weight(rng, dim, 3 * dim));
    add_linear(p, rng, prefix + "attn.out.", dim, dim);
    if (opt.locality) p.add(prefix + "attn.log_temp", Matrix::Constant(1, 1, 0.5 * std::log(dim / static_cast<double>(opt.heads))));
    add_layer_norm(p, prefix + "norm2.", dim);
    add_linear(p, rng, prefix + "mlp.fc1.", dim, dim * mlp_ratio);
    add_linear(p, rng, prefix + "mlp.fc2.", dim * mlp_ratio, dim);
}

inline ad::Var linear(ad::ParamBinder& P, const std::string& prefix, const ad::Var& x) {
    return ad::add_rowwise(ad::matmul(x, P(prefix + "weight")), P(prefix + "bias"));
}

inline ad::Var layer_norm(ad::ParamBinder& P, const std::string& prefix, const ad::Var& x) {
    return ad::layer_norm_rows(x, P(prefix + "gamma"), P(prefix + "beta"));
}

/// One pre-norm block over n tokens. `mask` is an n x n additive score mask (0 or
/// kMaskedScore) applied on top of the diagonal mask.
inline ad::Var transformer_block(ad::ParamBinder& P, const std::string& prefix, const ad::Var& x, const BlockOptions& opt,
                                 const Matrix& mask, AttentionTrace* trace) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    const Eigen::Index dh = d / opt.heads;
    if (opt.locality && n < 2) throw DegenerateDataError("diagonal masking needs at least two tokens");

    const ad::Var h = layer_norm(P, prefix + "norm1.", x);
    const ad::Var qkv = ad::matmul(h, P(prefix + "attn.qkv.weight"));
    Matrix full_mask = mask;
    ad::Var inv_temp;
    if (opt.locality) {
        full_mask.diagonal().setConstant(kMaskedScore);
        inv_temp = ad::exp(ad::scale(P(prefix + "attn.log_temp"), -1.0));
    }
    std::vector<ad::Var> heads;
    for (int hd = 0; hd < opt.heads; ++hd) {
        const ad::Var q = ad::slice_cols(qkv, hd * dh, dh);
        const ad::Var k = ad::slice_cols(qkv, d + hd * dh, dh);
        const ad::Var v = ad::slice_cols(qkv, 2 * d + hd * dh, dh);
        ad::Var scores = ad::matmul_nt(q, k);
        scores = opt.locality ? ad::mul_scalar(scores, inv_temp) : ad::scale(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
        const ad::Var attn = ad::softmax_rows(ad::add_constant(scores, full_mask));
        if (trace) trace->weights.push_back(attn.value());
        heads.push_back(ad::matmul(attn, v));
    }
    const ad::Var merged = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
    const ad::Var x1 = ad::add(x, linear(P, prefix + "attn.out.", merged));

    const ad::Var h2 = layer_norm(P, prefix + "norm2.", x1);
    const ad::Var m = linear(P, prefix + "mlp.fc2.", ad::gelu(linear(P, prefix + "mlp.fc1.", h2)));
    return ad::add(x1, m);
}

/// Prepends the stage's CLS token, adds positional embeddings and runs `depth` blocks.
/// Tokens at index >= valid (not counting CLS) are padding: their key columns are masked.
/// Returns all (n + 1) output rows, CLS first.
inline ad::Var encode_sequence(ad::ParamBinder& P, const std::string& stage, const ad::Var& tokens, Eigen::Index valid,
                               int depth, const BlockOptions& opt, AttentionTrace* trace) {
    const Eigen::Index n = tokens.rows();
    const ad::Var pos = P(stage + ".pos");
    if (n + 1 > pos.rows()) throw ShapeError(stage + ": " + std::to_string(n) + " tokens exceed the positional table");
    ad::Var x = ad::concat_rows({P(stage + ".cls"), tokens});
    x = ad::add(x, ad::slice_rows(pos, 0, n + 1));
    Matrix mask = Matrix::Zero(n + 1, n + 1);
    for (Eigen::Index j = valid + 1; j <= n; ++j) mask.col(j).setConstant(kMaskedScore);
    for (int b = 0; b < depth; ++b) x = transformer_block(P, block_prefix(stage, b), x, opt, mask, trace);
    return x;
}

// ---- the model -------------------------------------------------------------------

struct Model {
    ModelConfig config;
    ad::Parameters params;
};

/// Seeded initialization. Weights ~ N(0, 2/(fan_in + fan_out)), biases 0, LayerNorm
/// gain 1, CLS/positional ~ N(0, 0.02^2), temperatures sqrt(d_head).
inline Model init_model(const ModelConfig& config, std::uint64_t seed) {
    if (const auto errors = config.validate(); !errors.empty()) throw InvalidArgument(errors.front());
    std::mt19937_64 rng(seed);
    Model m;
    m.config = config;
    auto& p = m.params;
    const int d = config.embed_dim;
    const BlockOptions lsa{config.heads, true};
    add_layer_norm(p, "spt.norm.", config.token_dim());
    add_linear(p, rng, "spt.proj.", config.token_dim(), d);
    p.add("spatial.cls", init_embedding(rng, 1, d));
    p.add("spatial.pos", init_embedding(rng, config.num_patches() + 1, d));
    for (int b = 0; b < config.spatial_depth; ++b) add_block(p, rng, block_prefix("spatial", b), d, config.mlp_ratio, lsa);
    p.add("temporal.cls", init_embedding(rng, 1, d));
    p.add("temporal.pos", init_embedding(rng, config.seq_len + 1, d));
    for (int b = 0; b < config.temporal_depth; ++b) add_block(p, rng, block_prefix("temporal", b), d, config.mlp_ratio, lsa);
    add_layer_norm(p, "head.norm.", d);
    add_linear(p, rng, "head.fc.", d, config.num_classes);
    add_linear(p, rng, "regressor.fc1.", d, config.regression_hidden);
    add_linear(p, rng, "regressor.fc2.", config.regression_hidden, config.alpha_dim);
    return m;
}

/// Spatial stage for one frame: returns the transformed spatial CLS token (1 x d).
inline ad::Var spatial_encode(ad::ParamBinder& P, const ModelConfig& config, const Matrix& frame_tokens,
                              AttentionTrace* trace = nullptr) {
    if (frame_tokens.rows() != config.num_patches() || frame_tokens.cols() != config.token_dim()) {
        throw ShapeError("frame tokens are " + std::to_string(frame_tokens.rows()) + "x" + std::to_string(frame_tokens.cols()) +
                         ", expected " + std::to_string(config.num_patches()) + "x" + std::to_string(config.token_dim()));
    }
    const ad::Var raw = P.tape().constant(frame_tokens);
    const ad::Var emb = linear(P, "spt.proj.", layer_norm(P, "spt.norm.", raw));
    const ad::Var out = encode_sequence(P, "spatial", emb, emb.rows(), config.spatial_depth, {config.heads, true}, trace);
    return ad::slice_rows(out, 0, 1);
}

struct TemporalOutput {
    ad::Var per_frame;  // n x d
    ad::Var video;      // 1 x d
};

/// Temporal stage over per-frame embeddings (one spatial CLS per row). Rows at
/// index >= valid are padding and excluded from attention.
inline TemporalOutput temporal_encode(ad::ParamBinder& P, const ModelConfig& config, const ad::Var& frame_embeddings,
                                      Eigen::Index valid, AttentionTrace* trace = nullptr) {
    const Eigen::Index n = frame_embeddings.rows();
    if (n < 1) throw ShapeError("temporal stage needs at least one frame");
    if (frame_embeddings.cols() != config.embed_dim) throw ShapeError("frame embedding width differs from embed_dim");
    const ad::Var out = encode_sequence(P, "temporal", frame_embeddings, valid, config.temporal_depth, {config.heads, true}, trace);
    return {ad::slice_rows(out, 1, n), ad::slice_rows(out, 0, 1)};
}

struct ForwardVars {
    ad::Var logits;      // 1 x num_classes
    ad::Var alpha_pred;  // n x alpha_dim
};

/// Forward pass on pre-tokenized frames. Frames at index >= valid_len are padding:
/// they skip the spatial stage and are masked out of temporal attention.
inline ForwardVars forward_tokens(ad::ParamBinder& P, const ModelConfig& config, std::span<const Matrix> frame_tokens,
                                  std::size_t valid_len, AttentionTrace* trace = nullptr) {
    const std::size_t n = frame_tokens.size();
    if (n == 0 || valid_len == 0) throw InvalidArgument("video has no frames");
    if (n > static_cast<std::size_t>(config.seq_len)) {
        throw InvalidArgument("video has " + std::to_string(n) + " frames, model sequence length is " + std::to_string(config.seq_len));
    }
    if (valid_len > n) throw InvalidArgument("valid length exceeds frame count");
    std::vector<ad::Var> cls;
    cls.reserve(n);
    for (std::size_t f = 0; f < valid_len; ++f) cls.push_back(spatial_encode(P, config, frame_tokens[f], trace));
    if (valid_len < n) cls.push_back(P.tape().constant(Matrix::Zero(static_cast<Eigen::Index>(n - valid_len), config.embed_dim)));
    const ad::Var frames = cls.size() == 1 ? cls.front() : ad::concat_rows(cls);
    const TemporalOutput temporal = temporal_encode(P, config, frames, static_cast<Eigen::Index>(valid_len), trace);

    ForwardVars out;
    out.logits = linear(P, "head.fc.", layer_norm(P, "head.norm.", temporal.video));
    out.alpha_pred = linear(P, "regressor.fc2.", ad::relu(linear(P, "regressor.fc1.", temporal.per_frame)));
    return out;
}

inline std::vector<Matrix> tokenize_frames(const ModelConfig& config, std::span<const Image> frames) {
    std::vector<Matrix> out;
    out.reserve(frames.size());
    for (const auto& f : frames) {
        if (f.height != config.image_size || f.width != config.image_size || f.channels != config.in_channels) {
            throw ShapeError("frame is " + std::to_string(f.height) + "x" + std::to_string(f.width) + "x" +
                             std::to_string(f.channels) + ", model expects " + std::to_string(config.image_size) + "x" +
                             std::to_string(config.image_size) + "x" + std::to_string(config.in_channels));
        }
        out.push_back(shifted_patch_tokenize(f, config.patch_size));
    }
    return out;
}

struct ModelOutput {
    Eigen::RowVectorXd class_logits;
    Matrix alpha_pred;  // frames x alpha_dim
};

/// Inference on a clip of at most seq_len frames; frames past `valid_len` are padding.
inline ModelOutput forward(const Model& model, std::span<const Image> frames, std::size_t valid_len,
                           AttentionTrace* trace = nullptr) {
    const auto tokens = tokenize_frames(model.config, frames);
    ad::Tape tape;
    ad::ParamBinder P(tape, model.params);
    const auto vars = forward_tokens(P, model.config, tokens, valid_len, trace);
    return {vars.logits.value().row(0), vars.alpha_pred.value()};
}

inline ModelOutput forward(const Model& model, std::span<const Image> frames) {
    return forward(model, frames, frames.size());
}

// ---- checkpoints ---------------------------------------------------------------------
//
// "STVT", u32 format version, u32 length + ModelConfig as JSON text, u32 parameter
// count, then per parameter: u32 name length, name bytes, u32 rows, u32 cols and
// rows*cols f32 values in row-major order. All little-endian.

inline void save_checkpoint(const Model& model, std::ostream& out) {
    io::write_magic(out, "STVT");
    io::write_le<std::uint32_t>(out, 1);
    const std::string cfg = nlohmann::json(model.config).dump();
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.params.size()));
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const auto& name = model.params.name(i);
        const auto& v = model.params.at(i);
        io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(v.rows()));
        io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(v.cols()));
        for (Eigen::Index r = 0; r < v.rows(); ++r)
            for (Eigen::Index c = 0; c < v.cols(); ++c) io::write_le<float>(out, static_cast<float>(v(r, c)));
    }
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InvalidArgument("cannot write checkpoint " + path.string());
    save_checkpoint(model, out);
}

inline Model load_checkpoint(std::istream& in) {
    io::expect_magic(in, "STVT");
    const auto version = io::read_le<std::uint32_t>(in, "version");
    if (version != 1) throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
    const auto cfg_len = io::read_le<std::uint32_t>(in, "config length");
    std::string cfg(cfg_len, '\0');
    if (!in.read(cfg.data(), cfg_len)) throw ParseError("truncated checkpoint config", 12);
    Model m;
    try {
        m.config = nlohmann::json::parse(cfg).get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad checkpoint config: ") + e.what(), 12);
    }
    const auto count = io::read_le<std::uint32_t>(in, "parameter count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = io::read_le<std::uint32_t>(in, "name length");
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw ParseError("truncated parameter name", static_cast<std::size_t>(in.tellg()));
        const auto rows = io::read_le<std::uint32_t>(in, "rows");
        const auto cols = io::read_le<std::uint32_t>(in, "cols");
        Matrix v(rows, cols);
        for (std::uint32_t r = 0; r < rows; ++r)
            for (std::uint32_t c = 0; c < cols; ++c) v(r, c) = io::read_le<float>(in, "value");
        m.params.add(name, std::move(v));
    }
    return m;
}

inline Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidArgument("cannot open checkpoint " + path.string());
    return load_checkpoint(in);
}

}  // namespace evmorph
