#ifndef CAPSIM_PREDICTOR_HPP
#define CAPSIM_PREDICTOR_HPP

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "capsim/tensor.hpp"
#include "capsim/tokenizer.hpp"

namespace capsim::predictor {

enum class Precision : uint8_t { Single, Double };

struct ModelConfig {
  int embed_dim = 32;  // E (paper default 128)
  int heads = 2;       // h (paper 4)
  int layers = 2;      // per encoder (paper 4)
  int ffn_multiplier = 4;
  int mlp_hidden = 32;
  uint32_t l_token = 24;
  uint32_t l_clip_max = 256;
  uint32_t context_rows = 0;  // M, from the tokenizer spec
  size_t vocab_size = 0;
  uint64_t seed = 0;
  Precision precision = Precision::Double;

  void validate() const;  // throws ConfigError
};

template <typename T>
struct AttentionLayerParams {
  std::vector<Mat<T>> wq, wk, wv;  // one E x (E/h) projection per head
  Mat<T> wo;                       // E x E
  Mat<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Mat<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

template <typename T>
struct Parameters {
  Mat<T> embedding;  // vocab x E
  std::vector<AttentionLayerParams<T>> instr_layers;
  std::vector<AttentionLayerParams<T>> block_layers;
  Mat<T> head_w1, head_b1;  // E x hidden, 1 x hidden
  Mat<T> head_w2, head_b2;  // hidden x 1, 1 x 1

  // Visits every named tensor in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

  static Parameters zeros_like(const Parameters& other);

private:
  template <typename Self, typename F>
  static void visit(Self& self, F&& f);
};

// Seed-deterministic initialization. `label_mean` tunes the head's final bias
// so initial predictions start near the label scale.
template <typename T>
Parameters<T> init_parameters(const ModelConfig& cfg, double label_mean = 1.0);

// Sinusoidal positional encoding, rows 0..n-1.
template <typename T>
Mat<T> positional_encoding(size_t n, size_t dim);

// Full forward pass for one encoded clip; output is positive (softplus head).
template <typename T>
T forward_clip(const tok::EncodedClip& clip, const Parameters<T>& params, const ModelConfig& cfg);

template <typename T>
std::vector<T> predict_clips(std::span<const tok::EncodedClip> clips, const Parameters<T>& params,
                             const ModelConfig& cfg);

double mape_loss(double prediction, double fact);  // throws DomainError on fact <= 0

// Mean MAPE over a dataset (forward only).
template <typename T>
T batch_loss(std::span<const tok::EncodedClip> batch, const Parameters<T>& params,
             const ModelConfig& cfg);

// Mean-MAPE gradients for a batch, accumulated into `grads` (zeroed first).
// Returns the batch loss. Throws NonFiniteGradError with the offending tensor
// name when a gradient is not finite.
template <typename T>
T compute_gradients(std::span<const tok::EncodedClip> batch, const Parameters<T>& params,
                    Parameters<T>& grads, const ModelConfig& cfg);

template <typename T>
struct TrainState {
  T learning_rate = T(0.001);
  T momentum = T(0.9);
  Parameters<T> velocity;
  Parameters<T> grads;  // scratch, zeroed each step
  uint64_t step = 0;
  uint64_t seed = 0;
};

template <typename T>
TrainState<T> make_train_state(const Parameters<T>& params, T learning_rate = T(0.001),
                               T momentum = T(0.9));

// One SGD-momentum step over the batch: v <- mu*v + g, p <- p - lr*v.
template <typename T>
T train_step(std::span<const tok::EncodedClip> batch, Parameters<T>& params, TrainState<T>& state,
             const ModelConfig& cfg);

struct EvalStats {
  double mean_mape = 0.0;
  std::vector<double> predictions;
  std::vector<double> per_clip_mape;
};

template <typename T>
EvalStats evaluate(std::span<const tok::EncodedClip> clips, const Parameters<T>& params,
                   const ModelConfig& cfg);

// ----- benchmark aggregation -------------------------------------------------

struct IntervalMeta {
  std::string benchmark;
  size_t clip_count = 0;
  uint64_t multiplicity = 1;
};

struct AggregateResult {
  std::map<std::string, double> interval_totals;
  std::map<std::string, double> benchmark_totals;
};

// Sums per-clip predictions into interval totals and weighted benchmark
// totals. Throws MissingClipError when an interval's predictions are missing,
// superfluous, or the interval is empty.
AggregateResult predict_benchmark(
    const std::vector<std::pair<std::string, double>>& clip_predictions,
    const std::map<std::string, IntervalMeta>& intervals);

// ----- checkpoints -----------------------------------------------------------

struct CheckpointHeader {
  int format_version = 1;
  ModelConfig config;
  std::string vocab_version;
  uint64_t vocab_hash = 0;
};

CheckpointHeader peek_checkpoint(const std::filesystem::path& path);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const tok::Vocabulary& vocab, const Parameters<T>& params);

// Refuses to load when the stored vocabulary hash differs from `vocab`.
template <typename T>
Parameters<T> load_checkpoint(const std::filesystem::path& path, const tok::Vocabulary& vocab,
                              ModelConfig* cfg_out = nullptr);

// ----- inline definitions ----------------------------------------------------

template <typename T>
template <typename Self, typename F>
void Parameters<T>::visit(Self& self, F&& f) {
  f("embedding", self.embedding);
  auto visit_stack = [&](const char* prefix, auto& layers) {
    for (size_t l = 0; l < layers.size(); ++l) {
      auto& layer = layers[l];
      const std::string base = std::string(prefix) + std::to_string(l) + ".";
      for (size_t h = 0; h < layer.wq.size(); ++h) {
        const std::string head = base + "h" + std::to_string(h) + ".";
        f(head + "wq", layer.wq[h]);
        f(head + "wk", layer.wk[h]);
        f(head + "wv", layer.wv[h]);
      }
      f(base + "wo", layer.wo);
      f(base + "ffn_w1", layer.ffn_w1);
      f(base + "ffn_b1", layer.ffn_b1);
      f(base + "ffn_w2", layer.ffn_w2);
      f(base + "ffn_b2", layer.ffn_b2);
      f(base + "ln1_gain", layer.ln1_gain);
      f(base + "ln1_bias", layer.ln1_bias);
      f(base + "ln2_gain", layer.ln2_gain);
      f(base + "ln2_bias", layer.ln2_bias);
    }
  };
  visit_stack("instr.", self.instr_layers);
  visit_stack("block.", self.block_layers);
  f("head_w1", self.head_w1);
  f("head_b1", self.head_b1);
  f("head_w2", self.head_w2);
  f("head_b2", self.head_b2);
}

template <typename T>
Parameters<T> Parameters<T>::zeros_like(const Parameters& other) {
  Parameters z;
  z.embedding = Mat<T>(other.embedding.rows, other.embedding.cols);
  auto zero_stack = [](const std::vector<AttentionLayerParams<T>>& src) {
    std::vector<AttentionLayerParams<T>> out(src.size());
    for (size_t l = 0; l < src.size(); ++l) {
      for (const auto& w : src[l].wq) out[l].wq.emplace_back(w.rows, w.cols);
      for (const auto& w : src[l].wk) out[l].wk.emplace_back(w.rows, w.cols);
      for (const auto& w : src[l].wv) out[l].wv.emplace_back(w.rows, w.cols);
      out[l].wo = Mat<T>(src[l].wo.rows, src[l].wo.cols);
      out[l].ffn_w1 = Mat<T>(src[l].ffn_w1.rows, src[l].ffn_w1.cols);
      out[l].ffn_b1 = Mat<T>(src[l].ffn_b1.rows, src[l].ffn_b1.cols);
      out[l].ffn_w2 = Mat<T>(src[l].ffn_w2.rows, src[l].ffn_w2.cols);
      out[l].ffn_b2 = Mat<T>(src[l].ffn_b2.rows, src[l].ffn_b2.cols);
      out[l].ln1_gain = Mat<T>(src[l].ln1_gain.rows, src[l].ln1_gain.cols);
      out[l].ln1_bias = Mat<T>(src[l].ln1_bias.rows, src[l].ln1_bias.cols);
      out[l].ln2_gain = Mat<T>(src[l].ln2_gain.rows, src[l].ln2_gain.cols);
      out[l].ln2_bias = Mat<T>(src[l].ln2_bias.rows, src[l].ln2_bias.cols);
    }
    return out;
  };
  z.instr_layers = zero_stack(other.instr_layers);
  z.block_layers = zero_stack(other.block_layers);
  z.head_w1 = Mat<T>(other.head_w1.rows, other.head_w1.cols);
  z.head_b1 = Mat<T>(other.head_b1.rows, other.head_b1.cols);
  z.head_w2 = Mat<T>(other.head_w2.rows, other.head_w2.cols);
  z.head_b2 = Mat<T>(other.head_b2.rows, other.head_b2.cols);
  return z;
}

}  // namespace capsim::predictor

#endif
