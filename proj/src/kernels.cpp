#include "pvm/kernels.hpp"

#include <algorithm>

namespace pvm {

template <class T>
SparseRows<T> SparseRows<T>::from(const Matrix<T>& M) {
  SparseRows<T> s;
  for (std::size_t r = 0; r < M.rows(); ++r) {
    std::vector<Entry> row;
    for (std::size_t c = 0; c < M.cols(); ++c)
      if (!ScalarOps<T>::is_zero(M(r, c))) row.push_back({static_cast<std::uint32_t>(c), M(r, c)});
    if (!row.empty()) {
      s.rows.push_back(static_cast<std::uint32_t>(r));
      s.entries.push_back(std::move(row));
    }
  }
  return s;
}

template <class T>
LayerPlan<T>::LayerPlan(std::span<const AttentionHead<T>> heads, const FeedForward<T>& ff, std::size_t D)
    : D_(D), act_(ff.activation) {
  for (const auto& head : heads) {
    if (head.Q.rows() != D || head.K.rows() != D || head.V.rows() != D || head.Q.cols() != D ||
        head.K.cols() != D || head.V.cols() != D)
      throw std::invalid_argument("LayerPlan: head dimension mismatch");
    HeadPlan hp;
    auto q = SparseRows<T>::from(head.Q);
    auto k = SparseRows<T>::from(head.K);
    // an inner-product coordinate contributes only if both sides can be nonzero
    for (std::size_t a = 0, b = 0; a < q.rows.size() && b < k.rows.size();) {
      if (q.rows[a] == k.rows[b]) {
        hp.qk_rows.push_back(q.rows[a]);
        hp.q.push_back(q.entries[a]);
        hp.k.push_back(k.entries[b]);
        ++a;
        ++b;
      } else if (q.rows[a] < k.rows[b]) {
        ++a;
      } else {
        ++b;
      }
    }
    hp.v = SparseRows<T>::from(head.V);
    if (hp.qk_rows.empty() || hp.v.rows.empty()) continue;  // the head adds exact zeros
    for (auto r : hp.v.rows) attn_rows_.push_back(r);
    heads_.push_back(std::move(hp));
  }
  std::sort(attn_rows_.begin(), attn_rows_.end());
  attn_rows_.erase(std::unique(attn_rows_.begin(), attn_rows_.end()), attn_rows_.end());

  if (ff.W1.cols() != D || ff.W2.rows() != D || ff.W2.cols() != ff.W1.rows())
    throw std::invalid_argument("LayerPlan: FFN dimension mismatch");
  w1_ = SparseRows<T>::from(ff.W1);
  hidden_ = w1_.rows.size();
  std::vector<long> compact(ff.W1.rows(), -1);
  for (std::size_t i = 0; i < w1_.rows.size(); ++i) compact[w1_.rows[i]] = static_cast<long>(i);
  for (std::size_t r = 0; r < D; ++r) {
    std::vector<typename SparseRows<T>::Entry> row;
    for (std::size_t k = 0; k < ff.W2.cols(); ++k) {
      if (ScalarOps<T>::is_zero(ff.W2(r, k)) || compact[k] < 0) continue;
      row.push_back({static_cast<std::uint32_t>(compact[k]), ff.W2(r, k)});
    }
    if (!row.empty()) {
      w2_rows_.push_back(static_cast<std::uint32_t>(r));
      w2_.push_back(std::move(row));
    }
  }
}

template <class T>
std::vector<T> LayerPlan<T>::apply(const std::vector<T>& in, std::size_t n, bool last_only) const {
  using Ops = ScalarOps<T>;
  const std::size_t D = D_;
  const std::size_t nh = heads_.size();

  // projections of every column for every head
  std::vector<std::vector<T>> qv(nh), kv(nh), vv(nh);
  for (std::size_t h = 0; h < nh; ++h) {
    qv[h].assign(n * heads_[h].qk_rows.size(), T(0));
    kv[h].assign(n * heads_[h].qk_rows.size(), T(0));
    vv[h].assign(n * heads_[h].v.rows.size(), T(0));
  }
  const long ln = static_cast<long>(n);
#pragma omp parallel for schedule(static)
  for (long jl = 0; jl < ln; ++jl) {
    const std::size_t j = static_cast<std::size_t>(jl);
    const T* x = in.data() + j * D;
    for (std::size_t h = 0; h < nh; ++h) {
      const auto& hp = heads_[h];
      const std::size_t m = hp.qk_rows.size();
      for (std::size_t i = 0; i < m; ++i) {
        T& qa = qv[h][j * m + i];
        for (const auto& e : hp.q[i]) Ops::add_product(qa, e.val, x[e.col]);
        T& ka = kv[h][j * m + i];
        for (const auto& e : hp.k[i]) Ops::add_product(ka, e.val, x[e.col]);
      }
      const std::size_t mv = hp.v.rows.size();
      for (std::size_t i = 0; i < mv; ++i) {
        T& va = vv[h][j * mv + i];
        for (const auto& e : hp.v.entries[i]) Ops::add_product(va, e.val, x[e.col]);
      }
    }
  }

  std::vector<long> slot(D, -1);
  for (std::size_t i = 0; i < attn_rows_.size(); ++i) slot[attn_rows_[i]] = static_cast<long>(i);

  const std::size_t first = last_only ? n - 1 : 0;
  const std::size_t count = n - first;
  std::vector<T> out(count * D);
#pragma omp parallel for schedule(dynamic)
  for (long jl = static_cast<long>(first); jl < ln; ++jl) {
    const std::size_t j = static_cast<std::size_t>(jl);
    const T* x = in.data() + j * D;
    T* y = out.data() + (j - first) * D;

    std::vector<T> acc(attn_rows_.size(), T(0));
    T s;
    for (std::size_t h = 0; h < nh; ++h) {
      const auto& hp = heads_[h];
      const std::size_t m = hp.qk_rows.size(), mv = hp.v.rows.size();
      const T* q = qv[h].data() + j * m;
      for (std::size_t jp = 0; jp < n; ++jp) {
        const T* k = kv[h].data() + jp * m;
        s = 0;
        for (std::size_t i = 0; i < m; ++i) {
          if (Ops::is_zero(q[i]) || Ops::is_zero(k[i])) continue;
          Ops::add_product(s, q[i], k[i]);
        }
        if (!(s > 0)) continue;
        const T* v = vv[h].data() + jp * mv;
        for (std::size_t i = 0; i < mv; ++i) {
          if (Ops::is_zero(v[i])) continue;
          Ops::add_product(acc[static_cast<std::size_t>(slot[hp.v.rows[i]])], s, v[i]);
        }
      }
    }
    for (std::size_t r = 0; r < D; ++r) y[r] = x[r];
    for (std::size_t i = 0; i < attn_rows_.size(); ++i) y[attn_rows_[i]] = x[attn_rows_[i]] + acc[i];

    // feed-forward on the attention output
    std::vector<T> hid(hidden_);
    for (std::size_t i = 0; i < hidden_; ++i) {
      T a(0);
      for (const auto& e : w1_.entries[i]) Ops::add_product(a, e.val, y[e.col]);
      hid[i] = activate(act_, a);
    }
    std::vector<T> upd(w2_rows_.size(), T(0));
    for (std::size_t i = 0; i < w2_rows_.size(); ++i) {
      T& u = upd[i];
      for (const auto& e : w2_[i]) {
        if (Ops::is_zero(hid[e.col])) continue;
        Ops::add_product(u, e.val, hid[e.col]);
      }
    }
    for (std::size_t i = 0; i < w2_rows_.size(); ++i) y[w2_rows_[i]] = y[w2_rows_[i]] + upd[i];
  }
  return out;
}

template struct SparseRows<double>;
template struct SparseRows<mpq_class>;
template class LayerPlan<double>;
template class LayerPlan<mpq_class>;

}  // namespace pvm
