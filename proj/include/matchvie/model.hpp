// The full two-branch model: backbone context -> (graph -> relevancy head)
// and (BIOES emissions -> CRF), trained jointly.
#pragma once

#include "matchvie/backbone.hpp"
#include "matchvie/graphnet.hpp"
#include "matchvie/heads.hpp"
#include "matchvie/inference.hpp"

#include <cmath>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace matchvie {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossConfig {
  bool use_focal = true;
  double focal_alpha = 0.75;
  double focal_gamma = 2.0;
  double lambda_entity = 1.0;
  double lambda_re = 1.0;

  heads::FocalParams focal() const {
    return use_focal ? heads::FocalParams::focal(focal_alpha, focal_gamma) : heads::FocalParams::cross_entropy();
  }
  void validate() const {
    if (!(focal_alpha >= 0 && focal_alpha <= 1)) throw ConfigError("loss.focal.alpha must lie in [0, 1]");
    if (!(focal_gamma >= 0)) throw ConfigError("loss.focal.gamma must be >= 0");
    if (!(lambda_entity >= 0)) throw ConfigError("loss.lambda_entity must be >= 0");
    if (!(lambda_re >= 0)) throw ConfigError("loss.lambda_re must be >= 0");
  }
};

struct ModelConfig {
  backbone::BackboneConfig backbone;
  graphnet::GraphConfig graph;
  LossConfig loss;
  bool use_kv_branch = true;

  void validate() const {
    backbone.validate();
    graph.validate();
    loss.validate();
  }
};

/// L = lambda_entity * L_entity + lambda_re * L_re; the relevancy term is
/// dropped when the key-value branch is disabled.
inline double joint_loss(double entity, double re, const ModelConfig& cfg) {
  if (std::isnan(entity) || std::isnan(re))
    throw TrainingError("non-finite loss (entity " + std::to_string(entity) + ", relevancy " + std::to_string(re) + ")");
  return cfg.loss.lambda_entity * entity + (cfg.use_kv_branch ? cfg.loss.lambda_re * re : 0.0);
}

/// Everything about one document that does not depend on the parameters.
template <typename Scalar>
struct Example {
  const Document* doc = nullptr;
  backbone::BackboneInputs<Scalar> inputs;
  std::optional<graphnet::GraphInputs<Scalar>> graph;
  std::vector<int> gold_tags;
  ad::Mat<Scalar> links;  // N x N, 1 where i -> j is annotated

  int num_segments() const { return static_cast<int>(doc->segments.size()); }
};

/// Sorted labels that receive BIOES tags: every label except "other".
inline std::vector<std::string> entity_categories(const std::vector<Document>& docs) {
  std::set<std::string> labels;
  for (const auto& d : docs)
    for (const auto& s : d.segments)
      if (s.label != "other" && !s.label.empty()) labels.insert(s.label);
  return {labels.begin(), labels.end()};
}

template <typename Scalar>
class Model {
 public:
  Model(ModelConfig cfg, Vocabulary vocab, heads::TagScheme scheme, std::uint64_t seed)
      : cfg_(std::move(cfg)), vocab_(std::move(vocab)), scheme_(std::move(scheme)) {
    cfg_.validate();
    InitRng rng(seed);
    backbone::add_params(store_, cfg_.backbone, vocab_.size(), rng);
    if (cfg_.use_kv_branch) {
      graphnet::add_params(store_, cfg_.graph, cfg_.backbone.embed_dim, rng);
      heads::add_edge_params(store_, cfg_.graph.d_edge, rng);
    }
    heads::add_tag_params(store_, cfg_.backbone.embed_dim, scheme_.num_tags(), rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  const heads::TagScheme& scheme() const { return scheme_; }
  ad::ParamStore<Scalar>& params() { return store_; }
  const ad::ParamStore<Scalar>& params() const { return store_; }

  Example<Scalar> prepare(const Document& doc) const {
    Example<Scalar> ex;
    ex.doc = &doc;
    ex.inputs = backbone::prepare_inputs<Scalar>(doc, vocab_, cfg_.backbone);
    if (cfg_.use_kv_branch) ex.graph = graphnet::prepare_graph<Scalar>(doc, ex.inputs.spans, cfg_.graph);
    const int n = static_cast<int>(doc.segments.size());
    ex.gold_tags.reserve(static_cast<std::size_t>(ex.inputs.total_tokens));
    for (const auto& s : doc.segments) {
      const auto tags = scheme_.encode_segment(static_cast<int>(s.tokens.size()), scheme_.index_of(s.label));
      ex.gold_tags.insert(ex.gold_tags.end(), tags.begin(), tags.end());
    }
    ex.links = ad::Mat<Scalar>::Zero(n, n);
    for (const auto& l : doc.links())
      if (l.key != l.value) ex.links(l.key, l.value) = 1;
    return ex;
  }

  struct Forward {
    ad::Var<Scalar> emissions;
    std::optional<ad::Var<Scalar>> edge_logits;
  };

  Forward forward(ad::Tape<Scalar>& tape, const Example<Scalar>& ex) {
    Forward f;
    const auto ctx = backbone::encode(tape, store_, cfg_.backbone, ex.inputs);
    f.emissions = heads::bioes_logits(tape, store_, ctx.features);
    if (cfg_.use_kv_branch && ex.num_segments() > 0) {
      auto g = graphnet::init_graph(tape, store_, ctx, *ex.graph);
      g = graphnet::run_gnn(tape, store_, cfg_.graph, g);
      f.edge_logits = heads::edge_logits(tape, store_, g.edges);
    }
    return f;
  }

  struct Losses {
    ad::Var<Scalar> total;
    double entity = 0;
    double re = 0;
  };

  Losses loss(ad::Tape<Scalar>& tape, const Example<Scalar>& ex) {
    const Forward f = forward(tape, ex);
    Losses out;
    ad::Var<Scalar> entity =
        heads::crf_nll(f.emissions, ex.inputs.spans, ex.gold_tags, backbone::param(tape, store_, "crf/transitions"),
                       backbone::param(tape, store_, "crf/start"), backbone::param(tape, store_, "crf/end"));
    out.entity = static_cast<double>(entity.scalar());
    out.total = ad::scale(entity, static_cast<Scalar>(cfg_.loss.lambda_entity));
    if (f.edge_logits) {
      ad::Var<Scalar> re = heads::focal_loss(*f.edge_logits, ex.links, cfg_.loss.focal());
      out.re = static_cast<double>(re.scalar());
      out.total = out.total + ad::scale(re, static_cast<Scalar>(cfg_.loss.lambda_re));
    }
    joint_loss(out.entity, out.re, cfg_);
    if (!std::isfinite(static_cast<double>(out.total.scalar())))
      throw TrainingError("non-finite loss on document " + ex.doc->id);
    return out;
  }

  struct Prediction {
    ad::Mat<double> probs;  // N x N; empty without the key-value branch
    std::vector<int> tags;
    std::vector<inference::SegmentTags> segments;
  };

  Prediction predict(const Example<Scalar>& ex) {
    ad::Tape<Scalar> tape;
    const Forward f = forward(tape, ex);
    Prediction p;
    const int n = ex.num_segments();
    if (f.edge_logits) p.probs = heads::match_probabilities(f.edge_logits->value(), n).template cast<double>();
    const ad::Mat<Scalar>& em = f.emissions.value();
    const heads::CrfView<Scalar> crf{store_.get("crf/transitions").value, store_.get("crf/start").value,
                                     store_.get("crf/end").value};
    p.tags = heads::decode_chains(em, ex.inputs.spans, crf);
    for (const auto& [b, e] : ex.inputs.spans) {
      inference::SegmentTags st;
      st.spans = heads::TagScheme::decode(std::vector<int>(p.tags.begin() + b, p.tags.begin() + e));
      double conf = 0;
      for (int t = b; t < e; ++t) {
        const Eigen::RowVectorXd row = em.row(t).template cast<double>();
        const double m = row.maxCoeff();
        conf += std::exp(static_cast<double>(row(p.tags[static_cast<std::size_t>(t)])) - m) / (row.array() - m).exp().sum();
      }
      st.confidence = e > b ? conf / (e - b) : 0.0;
      p.segments.push_back(std::move(st));
    }
    return p;
  }

 private:
  ModelConfig cfg_;
  Vocabulary vocab_;
  heads::TagScheme scheme_;
  ad::ParamStore<Scalar> store_;
};

}  // namespace matchvie
