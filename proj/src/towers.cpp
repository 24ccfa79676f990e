#include "twotower/towers.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace twotower {

namespace {

void fill_uniform(Eigen::Ref<Matrix> m, double bound, Rng& rng) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-bound, bound);
}

Mlp init_mlp(std::size_t dim, std::size_t hidden, Rng& rng) {
  Mlp mlp = Mlp::zeros(dim, hidden);
  const double bound = std::sqrt(6.0 / static_cast<double>(dim + hidden));
  fill_uniform(mlp.w1, bound, rng);
  fill_uniform(mlp.w2, bound, rng);
  return mlp;
}

struct MlpOutput {
  Matrix out;
  Matrix hidden_pre;
  Matrix hidden;
};

MlpOutput mlp_forward(const Mlp& mlp, const Matrix& input) {
  MlpOutput r;
  r.hidden_pre.noalias() = input * mlp.w1;
  r.hidden_pre.rowwise() += mlp.b1;
  r.hidden = r.hidden_pre.cwiseMax(0.0);
  r.out.noalias() = r.hidden * mlp.w2;
  r.out.rowwise() += mlp.b2;
  return r;
}

// Accumulates parameter gradients into `grad` and returns d(loss)/d(input).
Matrix mlp_backward(const Mlp& mlp, const Matrix& input, const Matrix& hidden_pre,
                    const Matrix& hidden, const Matrix& grad_out, Mlp& grad) {
  grad.w2.noalias() += hidden.transpose() * grad_out;
  grad.b2 += grad_out.colwise().sum();
  Matrix grad_hidden = grad_out * mlp.w2.transpose();
  grad_hidden.array() *= (hidden_pre.array() > 0.0).cast<double>();
  grad.w1.noalias() += input.transpose() * grad_hidden;
  grad.b1 += grad_hidden.colwise().sum();
  return grad_hidden * mlp.w1.transpose();
}

void check_rows(const Matrix& grad, std::size_t rows, std::size_t cols, const char* what) {
  if (static_cast<std::size_t>(grad.rows()) != rows || static_cast<std::size_t>(grad.cols()) != cols) {
    throw ShapeError(std::string(what) + ": gradient shape does not match forward output");
  }
}

void append(std::vector<double>& out, const Matrix& m) { out.insert(out.end(), m.data(), m.data() + m.size()); }
void append(std::vector<double>& out, const RowVector& v) { out.insert(out.end(), v.data(), v.data() + v.size()); }

void append(std::vector<double>& out, const SparseRows& rows) {
  const auto offset = out.size();
  out.resize(offset + rows.n_rows() * rows.cols(), 0.0);
  for (std::size_t slot = 0; slot < rows.touched().size(); ++slot) {
    const auto values = rows.values(slot);
    std::copy(values.begin(), values.end(), out.begin() + static_cast<std::ptrdiff_t>(offset + rows.touched()[slot] * rows.cols()));
  }
}

}  // namespace

Mlp Mlp::zeros(std::size_t dim, std::size_t hidden) {
  const auto d = static_cast<Eigen::Index>(dim);
  const auto h = static_cast<Eigen::Index>(hidden);
  return {Matrix::Zero(d, h), RowVector::Zero(h), Matrix::Zero(h, d), RowVector::Zero(d)};
}

ModelParams init_params(std::size_t n_items, std::size_t n_users, const TowerConfig& config,
                        std::uint64_t seed) {
  if (config.dim == 0 || config.hidden == 0) throw ConfigError("dim and hidden must be positive");
  if (n_items == 0) throw ConfigError("model needs at least one item");
  const auto d = static_cast<Eigen::Index>(config.dim);
  Rng rng(mix_seed(seed, 0x1417));
  const double embed_bound = 1.0 / std::sqrt(static_cast<double>(config.dim));

  ModelParams p;
  p.item_embed.resize(static_cast<Eigen::Index>(n_items), d);
  fill_uniform(p.item_embed, embed_bound, rng);
  p.user_embed.resize(config.user_embedding ? static_cast<Eigen::Index>(n_users) : 0, d);
  fill_uniform(p.user_embed, embed_bound, rng);
  p.empty_history.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) p.empty_history(j) = rng.uniform(-embed_bound, embed_bound);
  p.user_mlp = init_mlp(config.dim, config.hidden, rng);
  p.item_mlp = init_mlp(config.dim, config.hidden, rng);
  return p;
}

std::vector<TensorView> tensors(ModelParams& p) {
  auto view = [](std::string name, auto& m) {
    return TensorView{std::move(name), static_cast<std::size_t>(m.rows()),
                      static_cast<std::size_t>(m.cols()),
                      std::span<double>(m.data(), static_cast<std::size_t>(m.size()))};
  };
  return {view("item_embed", p.item_embed),   view("user_embed", p.user_embed),
          view("empty_history", p.empty_history),
          view("user_mlp.w1", p.user_mlp.w1), view("user_mlp.b1", p.user_mlp.b1),
          view("user_mlp.w2", p.user_mlp.w2), view("user_mlp.b2", p.user_mlp.b2),
          view("item_mlp.w1", p.item_mlp.w1), view("item_mlp.b1", p.item_mlp.b1),
          view("item_mlp.w2", p.item_mlp.w2), view("item_mlp.b2", p.item_mlp.b2)};
}

std::size_t parameter_count(const ModelParams& params) {
  std::size_t n = 0;
  for (const auto& t : tensors(const_cast<ModelParams&>(params))) n += t.data.size();
  return n;
}

SparseRows::SparseRows(std::size_t n_rows, std::size_t cols) : cols_(cols), slot_of_(n_rows, kAbsent) {}

double* SparseRows::row(std::uint32_t index) {
  if (index >= slot_of_.size()) throw std::out_of_range("sparse gradient row out of range");
  auto& slot = slot_of_[index];
  if (slot == kAbsent) {
    slot = static_cast<std::uint32_t>(rows_.size());
    rows_.push_back(index);
    values_.resize(values_.size() + cols_, 0.0);
  }
  return values_.data() + static_cast<std::size_t>(slot) * cols_;
}

const double* SparseRows::find(std::uint32_t index) const {
  if (index >= slot_of_.size() || slot_of_[index] == kAbsent) return nullptr;
  return values_.data() + static_cast<std::size_t>(slot_of_[index]) * cols_;
}

Gradients Gradients::zeros_like(const ModelParams& params) {
  const auto d = params.dim();
  const auto h = params.hidden();
  return {SparseRows(params.n_items(), d),
          SparseRows(static_cast<std::size_t>(params.user_embed.rows()), d),
          RowVector::Zero(static_cast<Eigen::Index>(d)), Mlp::zeros(d, h), Mlp::zeros(d, h)};
}

std::vector<double> Gradients::flatten() const {
  std::vector<double> out;
  append(out, item_embed);
  append(out, user_embed);
  append(out, empty_history);
  for (const Mlp* m : {&user_mlp, &item_mlp}) {
    append(out, m->w1);
    append(out, m->b1);
    append(out, m->w2);
    append(out, m->b2);
  }
  return out;
}

std::pair<Matrix, ItemTape> item_forward(const ModelParams& params, std::span<const ItemIndex> items) {
  const auto d = static_cast<Eigen::Index>(params.dim());
  ItemTape tape;
  tape.items.assign(items.begin(), items.end());
  tape.input.resize(static_cast<Eigen::Index>(items.size()), d);
  for (std::size_t r = 0; r < items.size(); ++r) {
    if (items[r] >= params.n_items()) throw std::out_of_range("item index out of range");
    tape.input.row(static_cast<Eigen::Index>(r)) = params.item_embed.row(items[r]);
  }
  auto fwd = mlp_forward(params.item_mlp, tape.input);
  tape.hidden_pre = std::move(fwd.hidden_pre);
  tape.hidden = std::move(fwd.hidden);
  return {std::move(fwd.out), std::move(tape)};
}

std::pair<Matrix, UserTape> user_forward(const ModelParams& params,
                                         std::span<const std::vector<ItemIndex>> histories,
                                         std::span<const UserIndex> users) {
  const auto d = static_cast<Eigen::Index>(params.dim());
  const bool with_ids = params.has_user_embedding();
  if (with_ids && users.size() != histories.size()) {
    throw ShapeError("user_forward: user ids must align with histories");
  }
  UserTape tape;
  tape.histories.assign(histories.begin(), histories.end());
  if (with_ids) tape.users.assign(users.begin(), users.end());
  tape.input.setZero(static_cast<Eigen::Index>(histories.size()), d);
  for (std::size_t r = 0; r < histories.size(); ++r) {
    auto row = tape.input.row(static_cast<Eigen::Index>(r));
    const auto& history = histories[r];
    if (history.empty()) {
      row = params.empty_history;
    } else {
      for (const auto item : history) {
        if (item >= params.n_items()) throw std::out_of_range("history item index out of range");
        row += params.item_embed.row(item);
      }
      row /= static_cast<double>(history.size());
    }
    if (with_ids) {
      if (users[r] >= static_cast<std::size_t>(params.user_embed.rows())) {
        throw std::out_of_range("user index out of range");
      }
      row += params.user_embed.row(users[r]);
    }
  }
  auto fwd = mlp_forward(params.user_mlp, tape.input);
  tape.hidden_pre = std::move(fwd.hidden_pre);
  tape.hidden = std::move(fwd.hidden);
  return {std::move(fwd.out), std::move(tape)};
}

double score(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ShapeError("score: embedding lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

void item_backward(const ModelParams& params, const ItemTape& tape, const Matrix& grad_v,
                   Gradients& grads) {
  check_rows(grad_v, tape.items.size(), params.dim(), "item_backward");
  if (tape.items.empty()) return;
  const Matrix grad_in = mlp_backward(params.item_mlp, tape.input, tape.hidden_pre, tape.hidden,
                                      grad_v, grads.item_mlp);
  const auto d = params.dim();
  for (std::size_t r = 0; r < tape.items.size(); ++r) {
    double* g = grads.item_embed.row(tape.items[r]);
    const double* src = grad_in.row(static_cast<Eigen::Index>(r)).data();
    for (std::size_t j = 0; j < d; ++j) g[j] += src[j];
  }
}

void user_backward(const ModelParams& params, const UserTape& tape, const Matrix& grad_u,
                   Gradients& grads) {
  check_rows(grad_u, tape.histories.size(), params.dim(), "user_backward");
  if (tape.histories.empty()) return;
  const Matrix grad_in = mlp_backward(params.user_mlp, tape.input, tape.hidden_pre, tape.hidden,
                                      grad_u, grads.user_mlp);
  const auto d = params.dim();
  for (std::size_t r = 0; r < tape.histories.size(); ++r) {
    const double* src = grad_in.row(static_cast<Eigen::Index>(r)).data();
    const auto& history = tape.histories[r];
    if (history.empty()) {
      for (std::size_t j = 0; j < d; ++j) grads.empty_history(static_cast<Eigen::Index>(j)) += src[j];
    } else {
      const double share = 1.0 / static_cast<double>(history.size());
      for (const auto item : history) {
        double* g = grads.item_embed.row(item);
        for (std::size_t j = 0; j < d; ++j) g[j] += share * src[j];
      }
    }
    if (!tape.users.empty()) {
      double* g = grads.user_embed.row(tape.users[r]);
      for (std::size_t j = 0; j < d; ++j) g[j] += src[j];
    }
  }
}

Gradients backward(const ModelParams& params, const UserTape& user_tape, const ItemTape& item_tape,
                   const Matrix& grad_u, const Matrix& grad_v) {
  auto grads = Gradients::zeros_like(params);
  user_backward(params, user_tape, grad_u, grads);
  item_backward(params, item_tape, grad_v, grads);
  return grads;
}

double add_l2_penalty(const ModelParams& params, double coefficient, Gradients& grads) {
  if (coefficient < 0.0) throw ConfigError("l2 coefficient must be non-negative");
  if (coefficient == 0.0) return 0.0;
  double penalty = 0.0;
  const std::pair<const Mlp*, Mlp*> towers[] = {{&params.user_mlp, &grads.user_mlp},
                                                {&params.item_mlp, &grads.item_mlp}};
  for (const auto& [w, g] : towers) {
    penalty += w->w1.squaredNorm() + w->w2.squaredNorm();
    g->w1 += 2.0 * coefficient * w->w1;
    g->w2 += 2.0 * coefficient * w->w2;
  }
  return coefficient * penalty;
}

std::pair<double, Gradients> l2_penalty(const ModelParams& params, double coefficient) {
  auto grads = Gradients::zeros_like(params);
  const double penalty = add_l2_penalty(params, coefficient, grads);
  return {penalty, std::move(grads)};
}

namespace {
constexpr char kCheckpointMagic[] = "twotower-checkpoint v1\n";
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  auto views = tensors(const_cast<ModelParams&>(params));
  out << kCheckpointMagic;
  for (const auto& t : views) out << t.name << ' ' << t.rows << ' ' << t.cols << '\n';
  out << "end\n";
  for (const auto& t : views) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  if (line + "\n" != kCheckpointMagic) throw DataError("not a checkpoint: " + path.string());

  struct Entry { std::string name; std::size_t rows, cols; };
  std::vector<Entry> manifest;
  while (std::getline(in, line) && line != "end") {
    std::istringstream fields(line);
    Entry e;
    if (!(fields >> e.name >> e.rows >> e.cols)) throw DataError("bad checkpoint manifest line: " + line);
    manifest.push_back(e);
  }

  ModelParams params;
  auto views = tensors(params);
  if (manifest.size() != views.size()) throw DataError("checkpoint tensor count mismatch");
  auto resize = [](auto& m, std::size_t rows, std::size_t cols) {
    using T = std::decay_t<decltype(m)>;
    if constexpr (T::RowsAtCompileTime == 1) {
      if (rows != 1) throw DataError("checkpoint vector with rows != 1");
      m.resize(static_cast<Eigen::Index>(cols));
    } else {
      m.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    }
  };
  const auto shape = [&](std::size_t k) { return std::pair{manifest[k].rows, manifest[k].cols}; };
  for (std::size_t k = 0; k < views.size(); ++k) {
    if (manifest[k].name != views[k].name) throw DataError("unexpected checkpoint tensor " + manifest[k].name);
  }
  resize(params.item_embed, shape(0).first, shape(0).second);
  resize(params.user_embed, shape(1).first, shape(1).second);
  resize(params.empty_history, shape(2).first, shape(2).second);
  resize(params.user_mlp.w1, shape(3).first, shape(3).second);
  resize(params.user_mlp.b1, shape(4).first, shape(4).second);
  resize(params.user_mlp.w2, shape(5).first, shape(5).second);
  resize(params.user_mlp.b2, shape(6).first, shape(6).second);
  resize(params.item_mlp.w1, shape(7).first, shape(7).second);
  resize(params.item_mlp.b1, shape(8).first, shape(8).second);
  resize(params.item_mlp.w2, shape(9).first, shape(9).second);
  resize(params.item_mlp.b2, shape(10).first, shape(10).second);

  for (auto& t : tensors(params)) {
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw DataError("truncated checkpoint " + path.string());
  }
  return params;
}

}  // namespace twotower
