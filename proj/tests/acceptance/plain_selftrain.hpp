#pragma once

// Plain self-training reference: one shared head, refined labels only, no
// teacher. Forward and backward passes are written out by hand on Eigen
// matrices so that nothing is shared with the autodiff engine or the
// self-training loop. Only the initial weights and the data come from the
// library.

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <vector>

#include "refrec/data.hpp"
#include "refrec/geometry.hpp"
#include "refrec/model.hpp"
#include "refrec/pseudolabel.hpp"
#include "refrec/rng.hpp"

namespace plain {

using refrec::Matrix;
using refrec::RowVector;

struct Net {
  std::vector<Matrix> w, b;  // encoder layers then head hidden, head out
  int encoder_layers = 0;
};

struct Adam {
  std::vector<Matrix> m, v;
  long t = 0;
};

struct Options {
  int epochs = 0;
  int batch = 16;
  double lr = 1e-4;
  double wd = 1e-4;
  double val_fraction = 0.1;
  bool occlusion = true;
  double occ_min = 0.25, occ_max = 0.5;
  std::uint64_t seed = 0;
  refrec::model::ModelConfig model;
};

struct Losses {
  double source = 0.0, target = 0.0;
};

inline Matrix relu(const Matrix& a) { return a.cwiseMax(0.0); }

// Adds d(mean CE)/d(params) for one batch of clouds to `grad`; returns the loss.
inline double batch_step(const Net& net, const std::vector<const refrec::geometry::PointCloud*>& clouds,
                         const std::vector<int>& labels, std::vector<Matrix>& gw, std::vector<Matrix>& gb) {
  const auto bsz = static_cast<Eigen::Index>(clouds.size());
  const Eigen::Index n = clouds[0]->size();
  Matrix x(bsz * n, 3);
  for (Eigen::Index i = 0; i < bsz; ++i) x.middleRows(i * n, n) = clouds[static_cast<size_t>(i)]->points;

  const int L = net.encoder_layers;
  std::vector<Matrix> pre(static_cast<size_t>(L)), act(static_cast<size_t>(L + 1));
  act[0] = x;
  for (int l = 0; l < L; ++l) {
    pre[static_cast<size_t>(l)] = (act[static_cast<size_t>(l)] * net.w[static_cast<size_t>(l)]).rowwise() +
                                  RowVector(net.b[static_cast<size_t>(l)]);
    act[static_cast<size_t>(l + 1)] = relu(pre[static_cast<size_t>(l)]);
  }
  const Matrix& h = act[static_cast<size_t>(L)];
  const Eigen::Index d = h.cols();
  Matrix z(bsz, d);
  std::vector<Eigen::Index> arg(static_cast<size_t>(bsz * d));
  for (Eigen::Index i = 0; i < bsz; ++i)
    for (Eigen::Index j = 0; j < d; ++j) {
      Eigen::Index best = i * n;
      for (Eigen::Index r = i * n + 1; r < (i + 1) * n; ++r)
        if (h(r, j) > h(best, j)) best = r;
      z(i, j) = h(best, j);
      arg[static_cast<size_t>(i * d + j)] = best;
    }
  const auto hw = static_cast<size_t>(L), ow = static_cast<size_t>(L + 1);
  const Matrix a1 = (z * net.w[hw]).rowwise() + RowVector(net.b[hw]);
  const Matrix h1 = relu(a1);
  const Matrix logits = (h1 * net.w[ow]).rowwise() + RowVector(net.b[ow]);

  double loss = 0.0;
  Matrix dlogits(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < bsz; ++i) {
    const double mx = logits.row(i).maxCoeff();
    const RowVector e = (logits.row(i).array() - mx).exp().matrix();
    const double s = e.sum();
    const int y = labels[static_cast<size_t>(i)];
    loss += mx + std::log(s) - logits(i, y);
    dlogits.row(i) = e / s;
    dlogits(i, y) -= 1.0;
  }
  const double inv = 1.0 / static_cast<double>(bsz);
  loss *= inv;
  dlogits *= inv;

  gw[ow] += h1.transpose() * dlogits;
  gb[ow] += dlogits.colwise().sum();
  const Matrix da1 = ((dlogits * net.w[ow].transpose()).array() * (a1.array() > 0.0).cast<double>()).matrix();
  gw[hw] += z.transpose() * da1;
  gb[hw] += da1.colwise().sum();
  const Matrix dz = da1 * net.w[hw].transpose();
  Matrix dh = Matrix::Zero(h.rows(), d);
  for (Eigen::Index i = 0; i < bsz; ++i)
    for (Eigen::Index j = 0; j < d; ++j) dh(arg[static_cast<size_t>(i * d + j)], j) += dz(i, j);
  for (int l = L - 1; l >= 0; --l) {
    const auto ls = static_cast<size_t>(l);
    const Matrix da = (dh.array() * (pre[ls].array() > 0.0).cast<double>()).matrix();
    gw[ls] += act[ls].transpose() * da;
    gb[ls] += da.colwise().sum();
    if (l > 0) dh = da * net.w[ls].transpose();
  }
  return loss;
}

inline void adamw(Net& net, Adam& opt, const std::vector<Matrix>& gw, const std::vector<Matrix>& gb, double lr, double wd) {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const size_t count = net.w.size();
  if (opt.m.empty()) {
    for (size_t i = 0; i < count; ++i) {
      opt.m.push_back(Matrix::Zero(net.w[i].rows(), net.w[i].cols()));
      opt.v.push_back(Matrix::Zero(net.w[i].rows(), net.w[i].cols()));
    }
    for (size_t i = 0; i < count; ++i) {
      opt.m.push_back(Matrix::Zero(net.b[i].rows(), net.b[i].cols()));
      opt.v.push_back(Matrix::Zero(net.b[i].rows(), net.b[i].cols()));
    }
  }
  ++opt.t;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(opt.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(opt.t));
  auto upd = [&](Matrix& p, const Matrix& g, size_t k) {
    p *= 1.0 - lr * wd;
    opt.m[k] = b1 * opt.m[k] + (1.0 - b1) * g;
    opt.v[k] = b2 * opt.v[k] + (1.0 - b2) * g.cwiseProduct(g);
    p.array() -= lr * (opt.m[k].array() / c1) / ((opt.v[k].array() / c2).sqrt() + eps);
  };
  for (size_t i = 0; i < count; ++i) upd(net.w[i], gw[i], i);
  for (size_t i = 0; i < count; ++i) upd(net.b[i], gb[i], count + i);
}

/// Per-iteration (source, target) losses of plain self-training.
inline std::vector<Losses> run(const refrec::SourceSet& source, const refrec::TargetSet& target,
                               const refrec::PseudoLabelState& pls, const refrec::model::EncoderParams& rec_encoder,
                               const Options& o, long max_iterations) {
  using refrec::Rng;
  // Initial weights follow the documented draw order: encoder, source head, target head.
  Rng init = Rng(o.seed).split(5);
  auto enc = refrec::model::EncoderParams::init(o.model, init);
  auto head = refrec::model::HeadParams::init(o.model, init);
  (void)refrec::model::HeadParams::init(o.model, init);
  Net net;
  net.encoder_layers = static_cast<int>(rec_encoder.layers.size());
  for (const auto& l : rec_encoder.layers) {
    net.w.push_back(l.weight.data());
    net.b.push_back(l.bias.data());
  }
  (void)enc;
  net.w.push_back(head.hidden.weight.data());
  net.b.push_back(head.hidden.bias.data());
  net.w.push_back(head.out.weight.data());
  net.b.push_back(head.out.bias.data());

  std::vector<std::int64_t> easy, pool;
  std::map<std::int64_t, int> label;
  for (const auto& e : pls.entries) {
    if (e.split == refrec::SplitTag::easy_refined) easy.push_back(e.id);
    if (e.split == refrec::SplitTag::easy_refined || e.split == refrec::SplitTag::hard_refined) pool.push_back(e.id);
    label[e.id] = e.label;
  }
  std::map<std::int64_t, size_t> row;
  for (size_t i = 0; i < target.ids.size(); ++i) row[target.ids[i]] = i;

  const auto split = refrec::stratified_holdout(source.labels, o.val_fraction, o.seed);
  const auto b = static_cast<size_t>(o.batch);
  const long per_epoch = static_cast<long>((pool.size() + b - 1) / b);
  const long total = per_epoch * o.epochs;
  Adam opt;
  std::vector<Losses> out;
  for (long it = 0; it < std::min(total, max_iterations); ++it) {
    Rng r = Rng(o.seed).split(6).split(static_cast<std::uint64_t>(it));
    std::vector<size_t> src;
    for (size_t i = 0; i < b / 2; ++i) src.push_back(static_cast<size_t>(split.train[static_cast<size_t>(r.below(split.train.size()))]));
    std::vector<std::int64_t> ed, td;
    for (size_t i = b / 2; i < b; ++i) ed.push_back(easy[static_cast<size_t>(r.below(easy.size()))]);
    for (size_t i = 0; i < b; ++i) td.push_back(pool[static_cast<size_t>(r.below(pool.size()))]);

    std::vector<refrec::geometry::PointCloud> augmented;
    augmented.reserve(src.size());
    std::vector<const refrec::geometry::PointCloud*> sb, tb;
    std::vector<int> sl, tl;
    for (size_t p = 0; p < src.size(); ++p) {
      const auto& c = source.clouds[src[p]];
      if (o.occlusion) {
        Rng ar = r.split(1000 + p);
        const double f = ar.uniform(o.occ_min, o.occ_max);
        augmented.push_back(refrec::geometry::occlusion_augment(c, f, ar));
      } else {
        augmented.push_back(c);
      }
      sl.push_back(source.labels[src[p]]);
    }
    for (const auto& c : augmented) sb.push_back(&c);
    for (auto id : ed) {
      sb.push_back(&target.clouds[row.at(id)]);
      sl.push_back(label.at(id));
    }
    for (auto id : td) {
      tb.push_back(&target.clouds[row.at(id)]);
      tl.push_back(label.at(id));
    }

    std::vector<Matrix> gw, gb;
    for (size_t i = 0; i < net.w.size(); ++i) {
      gw.push_back(Matrix::Zero(net.w[i].rows(), net.w[i].cols()));
      gb.push_back(Matrix::Zero(net.b[i].rows(), net.b[i].cols()));
    }
    Losses l;
    l.source = batch_step(net, sb, sl, gw, gb);
    l.target = batch_step(net, tb, tl, gw, gb);
    out.push_back(l);
    const double lr = o.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(it) / static_cast<double>(total)));
    adamw(net, opt, gw, gb, lr, o.wd);
  }
  return out;
}

}  // namespace plain
