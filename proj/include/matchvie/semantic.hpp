// Bidirectional LSTM text encoder over frozen token embeddings, used to
// map key texts to category names by nearest L2 distance.
#pragma once

#include "matchvie/ad/ops.hpp"
#include "matchvie/docmodel.hpp"
#include "matchvie/inference.hpp"
#include "matchvie/init.hpp"
#include "matchvie/optim.hpp"

#include <algorithm>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace matchvie::inference {

class BiLstmEncoder : public TextEncoder {
 public:
  /// `table` is a copy of the token embedding table (vocab x d), kept frozen.
  BiLstmEncoder(Vocabulary vocab, ad::Mat<double> table, int hidden, std::uint64_t seed)
      : vocab_(std::move(vocab)), table_(std::move(table)), hidden_(hidden) {
    InitRng rng(seed);
    const Eigen::Index d = table_.cols();
    for (const char* dir : {"fw", "bw"}) {
      const std::string p = std::string("mapper/") + dir;
      params_.add(p + "/wx", xavier<double>(d, 4 * hidden, rng));
      params_.add(p + "/wh", xavier<double>(hidden, 4 * hidden, rng));
      ad::Mat<double> b = zeros<double>(1, 4 * hidden);
      b.block(0, hidden, 1, hidden).setOnes();  // forget gate starts open
      params_.add(p + "/b", std::move(b));
    }
  }

  int hidden() const { return hidden_; }
  ad::ParamStore<double>& params() { return params_; }
  const ad::ParamStore<double>& params() const { return params_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  const ad::Mat<double>& table() const { return table_; }

  /// Rows of word embeddings of a whitespace-split text.
  ad::Mat<double> embed(const std::string& text) const {
    std::istringstream in(text);
    std::vector<std::string> words;
    for (std::string w; in >> w;) words.push_back(w);
    ad::Mat<double> out = ad::Mat<double>::Zero(static_cast<Eigen::Index>(words.size()), table_.cols());
    for (std::size_t k = 0; k < words.size(); ++k) {
      const auto ids = vocab_.lookup_word(words[k]);
      for (int id : ids) out.row(static_cast<Eigen::Index>(k)) += table_.row(id);
      out.row(static_cast<Eigen::Index>(k)) /= static_cast<double>(ids.size());
    }
    return out;
  }

  /// 1 x 2h: final forward state followed by final backward state.
  ad::Var<double> encode(ad::Tape<double>& tape, const std::string& text) {
    const ad::Mat<double> x = embed(text);
    const ad::Var<double> fw = run(tape, x, "mapper/fw", false);
    const ad::Var<double> bw = run(tape, x, "mapper/bw", true);
    std::vector<ad::Var<double>> parts{fw, bw};
    return ad::concat_cols<double>(parts);
  }

  Eigen::RowVectorXd encode(const std::string& text) const override {
    ad::Tape<double> tape;
    auto* self = const_cast<BiLstmEncoder*>(this);  // forward pass only reads the parameters
    return self->encode(tape, text).value().row(0);
  }

  /// Fits the encoder so each key text lands nearest its category phrase:
  /// cross-entropy over softmax(-||enc(key) - enc(category)||^2). Returns the
  /// mean loss of the final epoch.
  double fit(const std::vector<std::pair<std::string, int>>& examples, const std::vector<std::string>& category_phrases,
             int epochs, double lr, std::uint64_t seed) {
    if (examples.empty() || category_phrases.empty()) return 0.0;
    Adam<double> opt(params_, {.lr = lr});
    std::mt19937_64 shuffle(seed);
    std::vector<std::size_t> order(examples.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    double last = 0;
    for (int e = 0; e < epochs; ++e) {
      std::shuffle(order.begin(), order.end(), shuffle);
      double total = 0;
      for (std::size_t k : order) {
        ad::Tape<double> tape;
        const ad::Var<double> key = encode(tape, examples[k].first);
        std::vector<ad::Var<double>> neg_dist;
        for (const auto& phrase : category_phrases) {
          const ad::Var<double> diff = key - encode(tape, phrase);
          neg_dist.push_back(ad::scale(ad::sum(ad::cmul(diff, diff)), -1.0));
        }
        const ad::Var<double> logits = ad::concat_cols<double>(neg_dist);
        const ad::Var<double> probs = ad::softmax_rows(logits);
        const double p = std::max(probs.value()(0, examples[k].second), 1e-12);
        total += -std::log(p);
        ad::Mat<double> pick = ad::Mat<double>::Zero(1, logits.cols());
        pick(0, examples[k].second) = -1.0 / p;  // d(-log p)/dp
        const ad::Var<double> loss = ad::sum(ad::cmul(probs, tape.constant(pick)));
        tape.backward(loss);
        ad::Gradients<double> g(params_);
        tape.collect(g);
        opt.step(params_, g);
      }
      last = total / static_cast<double>(examples.size());
    }
    return last;
  }

 private:
  ad::Var<double> run(ad::Tape<double>& tape, const ad::Mat<double>& x, const std::string& p, bool reverse) {
    const int h = hidden_;
    ad::Var<double> hs = tape.constant(ad::Mat<double>::Zero(1, h));
    ad::Var<double> cs = hs;
    const ad::Var<double> wx = tape.param(params_.get(p + "/wx"));
    const ad::Var<double> wh = tape.param(params_.get(p + "/wh"));
    const ad::Var<double> b = tape.param(params_.get(p + "/b"));
    const Eigen::Index n = x.rows();
    for (Eigen::Index s = 0; s < n; ++s) {
      const Eigen::Index t = reverse ? n - 1 - s : s;
      const ad::Var<double> xt = tape.constant(x.row(t));
      const ad::Var<double> z = ad::add_bias(ad::matmul(xt, wx) + ad::matmul(hs, wh), b);
      const ad::Var<double> i = ad::sigmoid(ad::slice_cols(z, 0, h));
      const ad::Var<double> f = ad::sigmoid(ad::slice_cols(z, h, h));
      const ad::Var<double> g = ad::tanh(ad::slice_cols(z, 2 * h, h));
      const ad::Var<double> o = ad::sigmoid(ad::slice_cols(z, 3 * h, h));
      cs = ad::cmul(f, cs) + ad::cmul(i, g);
      hs = ad::cmul(o, ad::tanh(cs));
    }
    return hs;
  }

  Vocabulary vocab_;
  ad::Mat<double> table_;
  int hidden_;
  ad::ParamStore<double> params_;
};

}  // namespace matchvie::inference
