#pragma once

// Multi-task training (class cross-entropy + per-frame alpha regression), top-k
// evaluation, the alpha-only control classifier and classification-head transfer.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "evmorph/autodiff.hpp"
#include "evmorph/error.hpp"
#include "evmorph/events.hpp"
#include "evmorph/fitting.hpp"
#include "evmorph/stvit.hpp"

namespace evmorph {

struct VideoSample {
    std::string id;
    std::vector<Image> frames;
    Matrix alpha_targets;  // frames x K
    int class_label = 0;
    std::size_t valid_len = 0;  // frames past this index are padding
};

struct TrainConfig {
    double lambda_balance = 1.0;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int epochs = 50;
    int batch_size = 8;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    /// Parameters whose name starts with any of these are not updated.
    std::vector<std::string> frozen_prefixes;

    std::vector<std::string> validate() const {
        std::vector<std::string> e;
        if (!(lambda_balance >= 0.0)) e.emplace_back("train.lambda must be >= 0");
        // 0 is accepted: it is the documented way to freeze every parameter
        if (!(learning_rate >= 0.0)) e.emplace_back("train.learning_rate must be >= 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0)) e.emplace_back("train.beta1 must be in [0, 1)");
        if (!(beta2 >= 0.0 && beta2 < 1.0)) e.emplace_back("train.beta2 must be in [0, 1)");
        if (!(epsilon > 0.0)) e.emplace_back("train.epsilon must be > 0");
        if (epochs < 0) e.emplace_back("train.epochs must be >= 0");
        if (batch_size < 1) e.emplace_back("train.batch_size must be >= 1");
        if (threads < 1) e.emplace_back("threads must be >= 1");
        return e;
    }
};

// ---- losses ------------------------------------------------------------------------

struct LossParts {
    double classification = 0.0;
    double regression = 0.0;
    double total = 0.0;
};

/// L = CE(softmax(logits), label) + lambda * mean over valid frames of ||alpha - alpha*||^2.
inline LossParts loss_total(const ModelOutput& output, const VideoSample& sample, double lambda_balance) {
    const auto& z = output.class_logits;
    if (sample.class_label < 0 || sample.class_label >= z.size()) throw ShapeError("class label outside the logit range");
    const std::size_t valid = sample.valid_len == 0 ? sample.frames.size() : sample.valid_len;
    if (output.alpha_pred.rows() < static_cast<Eigen::Index>(valid) || sample.alpha_targets.rows() < static_cast<Eigen::Index>(valid) ||
        output.alpha_pred.cols() != sample.alpha_targets.cols()) {
        throw ShapeError("alpha prediction and target shapes differ");
    }
    LossParts out;
    const double m = z.maxCoeff();
    out.classification = m + std::log((z.array() - m).exp().sum()) - z(sample.class_label);
    if (valid > 0) {
        const auto n = static_cast<Eigen::Index>(valid);
        out.regression = (output.alpha_pred.topRows(n) - sample.alpha_targets.topRows(n)).squaredNorm() / static_cast<double>(n);
    }
    out.total = out.classification + lambda_balance * out.regression;
    return out;
}

struct LossVars {
    ad::Var classification;
    ad::Var regression;
    ad::Var total;
};

inline LossVars loss_total(const ForwardVars& out, const Matrix& alpha_targets, int label, std::size_t valid,
                           double lambda_balance) {
    ad::Tape& tape = *out.logits.tape();
    LossVars l;
    l.classification = ad::cross_entropy(out.logits, label);
    const auto n = static_cast<Eigen::Index>(valid);
    const ad::Var target = tape.constant(alpha_targets.topRows(n));
    const ad::Var diff = ad::sub(ad::slice_rows(out.alpha_pred, 0, n), target);
    l.regression = ad::scale(ad::sum(ad::mul(diff, diff)), 1.0 / static_cast<double>(n));
    l.total = lambda_balance == 0.0 ? l.classification : ad::add(l.classification, ad::scale(l.regression, lambda_balance));
    return l;
}

// ---- optimizer ---------------------------------------------------------------------

class Adam {
public:
    Adam(const ad::Parameters& like, const TrainConfig& config)
        : m_(like.zeros_like()), v_(like.zeros_like()), config_(config) {
        trainable_.resize(like.size(), true);
        for (std::size_t i = 0; i < like.size(); ++i) {
            for (const auto& prefix : config.frozen_prefixes) {
                if (like.name(i).rfind(prefix, 0) == 0) trainable_[i] = false;
            }
        }
    }

    void step(ad::Parameters& params, const ad::Parameters& grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!trainable_[i]) continue;
            const Matrix& g = grads.at(i);
            m_.at(i) = config_.beta1 * m_.at(i) + (1.0 - config_.beta1) * g;
            v_.at(i) = config_.beta2 * v_.at(i) + (1.0 - config_.beta2) * g.cwiseProduct(g);
            params.at(i).array() -= config_.learning_rate * (m_.at(i).array() / c1) /
                                    ((v_.at(i).array() / c2).sqrt() + config_.epsilon);
        }
    }

    std::int64_t steps() const { return t_; }

private:
    ad::Parameters m_;
    ad::Parameters v_;
    TrainConfig config_;
    std::vector<bool> trainable_;
    std::int64_t t_ = 0;
};

// ---- metrics -------------------------------------------------------------------------

struct Metrics {
    double top1 = 0.0;
    double top3 = 0.0;
    double top5 = 0.0;
    std::vector<std::optional<double>> per_class;  // nullopt: no sample of that class
    Eigen::MatrixXi confusion;                     // rows: true class, cols: top-1 prediction
    std::size_t samples = 0;
};

/// Position of `label` when classes are sorted by descending logit, ties broken
/// toward the lower class index.
inline int class_rank(const Eigen::RowVectorXd& logits, int label) {
    int rank = 0;
    const double own = logits(label);
    for (int c = 0; c < logits.size(); ++c) {
        if (logits(c) > own || (logits(c) == own && c < label)) ++rank;
    }
    return rank;
}

inline int predicted_class(const Eigen::RowVectorXd& logits) {
    int best = 0;
    for (int c = 1; c < logits.size(); ++c)
        if (logits(c) > logits(best)) best = c;
    return best;
}

inline Metrics compute_metrics(std::span<const Eigen::RowVectorXd> logits, std::span<const int> labels, int num_classes) {
    if (logits.size() != labels.size()) throw ShapeError("logit and label counts differ");
    if (logits.empty()) throw InvalidArgument("cannot evaluate an empty dataset");
    Metrics m;
    m.samples = logits.size();
    m.confusion = Eigen::MatrixXi::Zero(num_classes, num_classes);
    std::vector<int> correct(static_cast<std::size_t>(num_classes), 0);
    std::vector<int> count(static_cast<std::size_t>(num_classes), 0);
    std::size_t hit1 = 0, hit3 = 0, hit5 = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const int y = labels[i];
        if (y < 0 || y >= num_classes || logits[i].size() != num_classes) throw ShapeError("label or logit width out of range");
        const int r = class_rank(logits[i], y);
        hit1 += r < 1;
        hit3 += r < 3;
        hit5 += r < 5;
        const int pred = predicted_class(logits[i]);
        ++m.confusion(y, pred);
        ++count[static_cast<std::size_t>(y)];
        correct[static_cast<std::size_t>(y)] += pred == y;
    }
    const auto n = static_cast<double>(logits.size());
    m.top1 = static_cast<double>(hit1) / n;
    m.top3 = static_cast<double>(hit3) / n;
    m.top5 = static_cast<double>(hit5) / n;
    for (int c = 0; c < num_classes; ++c) {
        if (count[static_cast<std::size_t>(c)] == 0) m.per_class.emplace_back(std::nullopt);
        else m.per_class.emplace_back(static_cast<double>(correct[static_cast<std::size_t>(c)]) / count[static_cast<std::size_t>(c)]);
    }
    return m;
}

// ---- dataset preparation ---------------------------------------------------------------

/// Splits clips longer than `seq_len` into consecutive windows (the last one may be
/// shorter) and fills in valid_len.
inline std::vector<VideoSample> split_into_windows(const std::vector<VideoSample>& samples, int seq_len) {
    std::vector<VideoSample> out;
    const auto L = static_cast<std::size_t>(seq_len);
    for (const auto& s : samples) {
        if (s.frames.empty()) throw InvalidArgument("sample " + s.id + " has no frames");
        if (s.alpha_targets.rows() != static_cast<Eigen::Index>(s.frames.size())) {
            throw ShapeError("sample " + s.id + ": alpha rows differ from frame count");
        }
        const std::size_t valid = s.valid_len == 0 ? s.frames.size() : s.valid_len;
        if (s.frames.size() <= L) {
            VideoSample c = s;
            c.valid_len = valid;
            out.push_back(std::move(c));
            continue;
        }
        for (std::size_t start = 0; start < valid; start += L) {
            const std::size_t len = std::min(L, valid - start);
            VideoSample w;
            w.id = s.id + "#" + std::to_string(start / L);
            w.frames.assign(s.frames.begin() + static_cast<std::ptrdiff_t>(start), s.frames.begin() + static_cast<std::ptrdiff_t>(start + len));
            w.alpha_targets = s.alpha_targets.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(len));
            w.class_label = s.class_label;
            w.valid_len = len;
            out.push_back(std::move(w));
        }
    }
    return out;
}

struct PreparedSample {
    std::vector<Matrix> tokens;
    Matrix alpha_targets;
    int label = 0;
    std::size_t valid = 0;
};

inline std::vector<PreparedSample> prepare_samples(const ModelConfig& config, const std::vector<VideoSample>& samples) {
    std::vector<PreparedSample> out;
    for (const auto& s : split_into_windows(samples, config.seq_len)) {
        if (s.class_label < 0 || s.class_label >= config.num_classes) {
            throw InvalidArgument("sample " + s.id + " label " + std::to_string(s.class_label) + " outside [0, " +
                                  std::to_string(config.num_classes) + ")");
        }
        if (s.alpha_targets.cols() != config.alpha_dim) {
            throw ShapeError("sample " + s.id + " has " + std::to_string(s.alpha_targets.cols()) + " alpha columns, model expects " +
                             std::to_string(config.alpha_dim));
        }
        out.push_back({tokenize_frames(config, s.frames), s.alpha_targets, s.class_label, s.valid_len});
    }
    return out;
}

// ---- generic minibatch loop -----------------------------------------------------------

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers. Each index is handled by
/// exactly one worker, so results stored per index do not depend on the thread count.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> workers;
    for (unsigned w = 0; w < threads; ++w) {
        workers.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += threads) fn(i);
        });
    }
    for (auto& t : workers) t.join();
}

struct SampleLoss {
    double total = 0.0;
    double classification = 0.0;
    double regression = 0.0;
    Eigen::RowVectorXd logits;
};

/// Builds the loss of sample `index` on the tape bound by the binder and returns its parts.
using SampleLossFn = std::function<std::pair<LossVars, ad::Var>(ad::ParamBinder&, std::size_t index)>;

struct EpochStats {
    double loss = 0.0;
    double classification_loss = 0.0;
    double regression_loss = 0.0;
    double train_top1 = 0.0;
};

/// One pass over `order` in minibatches. Per-sample gradients are computed in parallel
/// and summed in batch order, so the update is bitwise independent of `threads`.
inline EpochStats run_epoch(ad::Parameters& params, Adam& adam, std::span<const std::size_t> order, int batch_size,
                            unsigned threads, const std::vector<int>& labels, const SampleLossFn& loss_fn, int epoch) {
    EpochStats stats;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t count = std::min<std::size_t>(static_cast<std::size_t>(batch_size), order.size() - start);
        std::vector<ad::Parameters> grads(count);
        std::vector<SampleLoss> losses(count);
        parallel_for(count, threads, [&](std::size_t b) {
            const std::size_t idx = order[start + b];
            ad::Tape tape;
            ad::ParamBinder P(tape, params);
            auto [loss, logits] = loss_fn(P, idx);
            losses[b] = {loss.total.value()(0, 0), loss.classification.value()(0, 0), loss.regression.value()(0, 0),
                         logits.value().row(0)};
            if (!std::isfinite(losses[b].total)) return;
            tape.backward(ad::scale(loss.total, 1.0 / static_cast<double>(count)));
            grads[b] = params.zeros_like();
            P.accumulate_gradients(grads[b]);
        });
        for (std::size_t b = 0; b < count; ++b) {
            if (!std::isfinite(losses[b].total)) {
                throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", sample " +
                                      std::to_string(order[start + b]));
            }
        }
        ad::Parameters total = std::move(grads[0]);
        for (std::size_t b = 1; b < count; ++b)
            for (std::size_t i = 0; i < total.size(); ++i) total.at(i) += grads[b].at(i);
        adam.step(params, total);
        for (std::size_t b = 0; b < count; ++b) {
            stats.loss += losses[b].total;
            stats.classification_loss += losses[b].classification;
            stats.regression_loss += losses[b].regression;
            hits += predicted_class(losses[b].logits) == labels[order[start + b]];
        }
    }
    const auto n = static_cast<double>(std::max<std::size_t>(order.size(), 1));
    stats.loss /= n;
    stats.classification_loss /= n;
    stats.regression_loss /= n;
    stats.train_top1 = static_cast<double>(hits) / n;
    return stats;
}

// ---- the event-frame model --------------------------------------------------------------

/// Incremental trainer; train() drives it for a fixed number of epochs.
class Trainer {
public:
    Trainer(Model model, TrainConfig config, const std::vector<VideoSample>& dataset)
        : model_(std::move(model)), config_(std::move(config)), adam_(model_.params, config_), rng_(config_.seed ^ 0x5eed5eedULL) {
        if (const auto e = config_.validate(); !e.empty()) throw InvalidArgument(e.front());
        if (dataset.empty()) throw InvalidArgument("training set is empty");
        samples_ = prepare_samples(model_.config, dataset);
        for (const auto& s : samples_) labels_.push_back(s.label);
    }

    EpochStats run_epoch() {
        std::vector<std::size_t> order(samples_.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng_);
        const auto& cfg = model_.config;
        const double lambda = config_.lambda_balance;
        auto loss_fn = [&](ad::ParamBinder& P, std::size_t i) {
            const auto& s = samples_[i];
            const auto out = forward_tokens(P, cfg, s.tokens, s.valid);
            return std::make_pair(loss_total(out, s.alpha_targets, s.label, s.valid, lambda), out.logits);
        };
        const auto stats = evmorph::run_epoch(model_.params, adam_, order, config_.batch_size, config_.threads, labels_, loss_fn,
                                              static_cast<int>(history_.size()));
        history_.push_back(stats);
        return stats;
    }

    const Model& model() const { return model_; }
    const std::vector<EpochStats>& history() const { return history_; }

private:
    Model model_;
    TrainConfig config_;
    Adam adam_;
    std::mt19937_64 rng_;
    std::vector<PreparedSample> samples_;
    std::vector<int> labels_;
    std::vector<EpochStats> history_;
};

struct TrainResult {
    Model model;
    std::vector<EpochStats> history;
};

/// Adam on the joint loss. Initialization and data order derive from train_config.seed.
inline TrainResult train(const std::vector<VideoSample>& dataset, const ModelConfig& model_config,
                         const TrainConfig& train_config) {
    Trainer trainer(init_model(model_config, train_config.seed), train_config, dataset);
    for (int e = 0; e < train_config.epochs; ++e) trainer.run_epoch();
    return {trainer.model(), trainer.history()};
}

/// Continues training an existing model (e.g. after finetune_head).
inline TrainResult train(const std::vector<VideoSample>& dataset, Model model, const TrainConfig& train_config) {
    Trainer trainer(std::move(model), train_config, dataset);
    for (int e = 0; e < train_config.epochs; ++e) trainer.run_epoch();
    return {trainer.model(), trainer.history()};
}

inline std::vector<Eigen::RowVectorXd> predict_logits(const Model& model, const std::vector<VideoSample>& dataset,
                                                      unsigned threads = 1) {
    const auto windows = split_into_windows(dataset, model.config.seq_len);
    std::vector<Eigen::RowVectorXd> out(windows.size());
    parallel_for(windows.size(), threads, [&](std::size_t i) {
        out[i] = forward(model, windows[i].frames, windows[i].valid_len).class_logits;
    });
    return out;
}

/// Top-k and per-class accuracy; clips longer than seq_len count once per window.
inline Metrics evaluate(const Model& model, const std::vector<VideoSample>& dataset, unsigned threads = 1) {
    if (dataset.empty()) throw InvalidArgument("evaluation set is empty");
    const auto windows = split_into_windows(dataset, model.config.seq_len);
    const auto logits = predict_logits(model, dataset, threads);
    std::vector<int> labels;
    for (const auto& w : windows) labels.push_back(w.class_label);
    return compute_metrics(logits, labels, model.config.num_classes);
}

/// Replaces the final classification layer with a freshly initialized one of
/// `new_num_classes` outputs; every other parameter is kept. The head's LayerNorm is
/// part of the retained backbone.
inline Model finetune_head(const Model& model, int new_num_classes, std::uint64_t seed) {
    if (new_num_classes < 2) throw InvalidArgument("a classification head needs at least two classes");
    Model out = model;
    out.config.num_classes = new_num_classes;
    std::mt19937_64 rng(seed);
    out.params["head.fc.weight"] = init_weight(rng, model.config.embed_dim, new_num_classes);
    out.params["head.fc.bias"] = Matrix::Zero(1, new_num_classes);
    return out;
}

/// Prefixes to freeze so that only the new classification layer trains.
inline std::vector<std::string> backbone_prefixes() {
    return {"spt.", "spatial.", "temporal.", "head.norm.", "regressor."};
}

// ---- alpha-sequence control classifier ---------------------------------------------------

/// Encoder-only transformer over alpha vectors (no images): linear input projection,
/// temporal CLS + positional embeddings, standard attention blocks, LN -> linear head.
struct AlphaClassifierConfig {
    int embed_dim = 32;
    int depth = 2;
    int heads = 2;
    int mlp_ratio = 2;
    int num_classes = 24;
    TrainConfig train;
};

struct AlphaClassifier {
    AlphaClassifierConfig config;
    int alpha_dim = 0;
    int max_len = 0;
    ad::Parameters params;
};

inline AlphaClassifier init_alpha_classifier(const AlphaClassifierConfig& config, int alpha_dim, int max_len, std::uint64_t seed) {
    if (config.embed_dim % config.heads != 0) throw InvalidArgument("embed_dim must be divisible by heads");
    std::mt19937_64 rng(seed);
    AlphaClassifier m{config, alpha_dim, max_len, {}};
    auto& p = m.params;
    add_linear(p, rng, "alpha.in.", alpha_dim, config.embed_dim);
    p.add("temporal.cls", init_embedding(rng, 1, config.embed_dim));
    p.add("temporal.pos", init_embedding(rng, max_len + 1, config.embed_dim));
    for (int b = 0; b < config.depth; ++b)
        add_block(p, rng, block_prefix("temporal", b), config.embed_dim, config.mlp_ratio, {config.heads, false});
    add_layer_norm(p, "head.norm.", config.embed_dim);
    add_linear(p, rng, "head.fc.", config.embed_dim, config.num_classes);
    return m;
}

inline ad::Var alpha_classifier_logits(ad::ParamBinder& P, const AlphaClassifier& model, const AlphaSequence& seq) {
    const ad::Var x = linear(P, "alpha.in.", P.tape().constant(seq));
    const ad::Var out = encode_sequence(P, "temporal", x, x.rows(), model.config.depth, {model.config.heads, false}, nullptr);
    return linear(P, "head.fc.", layer_norm(P, "head.norm.", ad::slice_rows(out, 0, 1)));
}

inline Eigen::RowVectorXd predict(const AlphaClassifier& model, const AlphaSequence& seq) {
    ad::Tape tape;
    ad::ParamBinder P(tape, model.params);
    return alpha_classifier_logits(P, model, seq).value().row(0);
}

struct AlphaClassifierResult {
    AlphaClassifier model;
    Metrics train_metrics;
    Metrics test_metrics;
    std::vector<EpochStats> history;
};

/// Trains on the sequences with is_test == false and reports metrics on both splits.
/// An empty `is_test` draws a seeded 80-20 split.
inline AlphaClassifierResult train_alpha_classifier(const std::vector<AlphaSequence>& sequences, const std::vector<int>& labels,
                                                    std::vector<bool> is_test, const AlphaClassifierConfig& config) {
    if (sequences.empty()) throw InvalidArgument("no alpha sequences");
    if (sequences.size() != labels.size()) throw InvalidArgument("sequence and label counts differ");
    if (const auto e = config.train.validate(); !e.empty()) throw InvalidArgument(e.front());
    const auto K = sequences.front().cols();
    int max_len = 0;
    for (const auto& s : sequences) {
        if (s.cols() != K) throw InvalidArgument("alpha sequences do not share K");
        if (s.rows() < 1) throw InvalidArgument("empty alpha sequence");
        max_len = std::max(max_len, static_cast<int>(s.rows()));
    }
    for (int y : labels)
        if (y < 0 || y >= config.num_classes) throw InvalidArgument("label outside [0, num_classes)");
    if (is_test.empty()) {
        std::vector<std::size_t> idx(sequences.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::mt19937_64 split_rng(config.train.seed ^ 0xa1f4a5ULL);
        std::shuffle(idx.begin(), idx.end(), split_rng);
        is_test.assign(sequences.size(), false);
        for (std::size_t i = 0; i < idx.size() / 5; ++i) is_test[idx[i]] = true;
    }
    if (is_test.size() != sequences.size()) throw InvalidArgument("split flags do not match the sequence count");

    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < sequences.size(); ++i) (is_test[i] ? test_idx : train_idx).push_back(i);
    if (train_idx.empty()) throw InvalidArgument("training split is empty");

    AlphaClassifierResult result{init_alpha_classifier(config, static_cast<int>(K), max_len, config.train.seed), {}, {}, {}};
    Adam adam(result.model.params, config.train);
    std::mt19937_64 rng(config.train.seed ^ 0x5eed5eedULL);
    const auto& model = result.model;
    auto loss_fn = [&](ad::ParamBinder& P, std::size_t i) {
        const ad::Var logits = alpha_classifier_logits(P, model, sequences[i]);
        LossVars l;
        l.classification = ad::cross_entropy(logits, labels[i]);
        l.regression = P.tape().constant(Matrix::Zero(1, 1));
        l.total = l.classification;
        return std::make_pair(l, logits);
    };
    for (int e = 0; e < config.train.epochs; ++e) {
        std::vector<std::size_t> order = train_idx;
        std::shuffle(order.begin(), order.end(), rng);
        result.history.push_back(run_epoch(result.model.params, adam, order, config.train.batch_size, config.train.threads, labels,
                                           loss_fn, e));
    }
    auto metrics_on = [&](const std::vector<std::size_t>& idx) {
        std::vector<Eigen::RowVectorXd> logits;
        std::vector<int> ys;
        for (auto i : idx) {
            logits.push_back(predict(result.model, sequences[i]));
            ys.push_back(labels[i]);
        }
        return compute_metrics(logits, ys, config.num_classes);
    };
    result.train_metrics = metrics_on(train_idx);
    if (!test_idx.empty()) result.test_metrics = metrics_on(test_idx);
    return result;
}

}  // namespace evmorph
