#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include "pvm/core_math.hpp"
#include "pvm/kernels.hpp"
#include "pvm/token_model.hpp"

namespace pvm {

template <class T>
struct TransformerLayer {
  std::vector<AttentionHead<T>> heads;
  FeedForward<T> ff;
};

template <class T>
struct TransformerParams {
  std::size_t d = 0;
  std::vector<TransformerLayer<T>> layers;

  std::size_t token_dim() const { return 4 * d + 8; }
  std::size_t nonzeros() const;
  T max_abs_entry() const;
  std::size_t max_heads() const;
  std::size_t max_ffn_width() const;

  template <class U>
  TransformerParams<U> cast() const;
};

// Seven ReLU layers; head counts (1,1,8,1,4,8,4).
template <class T>
TransformerParams<T> build_theta_star(std::size_t d);

// Eight layers; EUAF only in the first FFN; head counts (1,1,1,8,1,4,8,4).
template <class T>
TransformerParams<T> build_theta_hash(std::size_t d);

enum class Kernel { reference, optimized };

const char* kernel_name(Kernel k);

// Full forward pass TF(H) with either kernel.
template <class T>
Matrix<T> apply_transformer(const TransformerParams<T>& params, const Matrix<T>& H, Kernel kernel);

struct GenerateOptions {
  Kernel kernel = Kernel::optimized;
  bool capture_layers = false;
};

template <class T>
struct GenerationTrace {
  std::vector<Vector<T>> tokens;  // appended columns h_{n0+1..n0+K}
  // layer_outputs[v][l] = output of layer l at step v (only with capture_layers)
  std::vector<std::vector<Matrix<T>>> layer_outputs;
};

// Iterative generation: apply the transformer, append its last column, repeat K times.
template <class T>
GenerationTrace<T> generate(const TransformerParams<T>& params, const Matrix<T>& H0, std::size_t K,
                            const GenerateOptions& opts = {});

// Parameters plus their layer plans, built once and shared by many runs.
template <class T>
class Engine {
 public:
  explicit Engine(TransformerParams<T> params);
  const TransformerParams<T>& params() const { return params_; }
  GenerationTrace<T> generate(const Matrix<T>& H0, std::size_t K, const GenerateOptions& opts = {}) const;

 private:
  TransformerParams<T> params_;
  std::vector<LayerPlan<T>> plans_;
};

struct EmulateOptions {
  ScaleVariant variant = ScaleVariant::general;
  Kernel kernel = Kernel::optimized;
};

template <class T>
struct Emulation {
  // outputs[i][l-1] = embedding of token T + N l + i (1-based i, l)
  std::vector<std::vector<Vector<T>>> outputs;
  std::vector<Vector<T>> generated;  // all N L generated columns
};

// Runs K = N L generation steps over [H^P, H^D]. Throws ScaleError when the
// prompt's S is below the variant's bound (or above the floating limit),
// PromptError when the prompt is outside its class or data leave [0, 1]^d.
template <class T>
Emulation<T> emulate_network(const Engine<T>& engine, const Prompt<T>& prompt, std::span<const Vector<T>> data,
                             long L, const EmulateOptions& opts = {});
template <class T>
Emulation<T> emulate_network(const TransformerParams<T>& params, const Prompt<T>& prompt,
                             std::span<const Vector<T>> data, long L, const EmulateOptions& opts = {});

// First coordinate of the layer-L output for the single datum [x, 1, 0].
template <class T>
T approximate_function(const Engine<T>& engine, const Prompt<T>& prompt, std::span<const T> x, long L,
                       const EmulateOptions& opts = {});
template <class T>
T approximate_function(const TransformerParams<T>& params, const Prompt<T>& prompt, std::span<const T> x, long L,
                       const EmulateOptions& opts = {});

// The bound emulate_network enforces for this prompt.
template <class T>
mpq_class required_scale(const Prompt<T>& prompt, long L, ScaleVariant variant);

// One JSON object per generated token: {"step", "token": {"u", "w", "j"}}.
template <class T>
void write_trace_jsonl(std::ostream& os, const GenerationTrace<T>& trace);

}  // namespace pvm
