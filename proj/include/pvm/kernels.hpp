#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pvm/core_math.hpp"

namespace pvm {

// Sparse row form of a dense matrix: only nonzero rows, each with its nonzero
// entries in ascending column order.
template <class T>
struct SparseRows {
  struct Entry {
    std::uint32_t col;
    T val;
  };
  std::vector<std::uint32_t> rows;
  std::vector<std::vector<Entry>> entries;

  static SparseRows from(const Matrix<T>& M);
};

// Precompiled form of one (attention, FFN) layer. apply() gives the same
// values as ffn_layer(attention_layer(H)) because it performs the same
// additions in the same order and only skips terms that are exactly zero.
// Columns are processed with an OpenMP parallel loop.
template <class T>
class LayerPlan {
 public:
  LayerPlan(std::span<const AttentionHead<T>> heads, const FeedForward<T>& ff, std::size_t D);

  // State is column-major: column j occupies [j*D, (j+1)*D). When last_only
  // is set only the last column of the output is computed and returned.
  std::vector<T> apply(const std::vector<T>& cols, std::size_t n, bool last_only) const;

 private:
  struct HeadPlan {
    std::vector<std::uint32_t> qk_rows;  // rows nonzero in both Q and K
    std::vector<std::vector<typename SparseRows<T>::Entry>> q, k;
    SparseRows<T> v;
  };
  std::size_t D_;
  std::vector<HeadPlan> heads_;
  std::vector<std::uint32_t> attn_rows_;  // rows any head can write
  SparseRows<T> w1_;
  std::vector<std::uint32_t> w2_rows_;
  std::vector<std::vector<typename SparseRows<T>::Entry>> w2_;  // by output row, hidden index ascending
  std::size_t hidden_ = 0;
  Activation act_;
};

}  // namespace pvm
