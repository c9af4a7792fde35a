#include "gxn/trainer.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

using namespace gxn;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum Exit { ok = 0, usage = 2, data_error = 3, numeric = 4 };

void require(bool cond, const std::string& what) {
  if (!cond) throw UsageError(what);
}

ImageEmbedding embed_bank(EmbeddingModel& model, const data::ImageBank& bank, std::size_t chunk = 100) {
  NoGradGuard g;
  const auto n = bank.size(), d = model.joint_dim();
  Tensor::Vector vh(static_cast<Eigen::Index>(n * d)), vl(vh.size());
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    const auto e = model.embed_images(bank.batch(idx), nn::Mode::eval);
    vh.segment(static_cast<Eigen::Index>(start * d), e.v_h.size()) = e.v_h.values();
    vl.segment(static_cast<Eigen::Index>(start * d), e.v_l.size()) = e.v_l.values();
  }
  return {Tensor::constant({n, d}, std::move(vh)), Tensor::constant({n, d}, std::move(vl))};
}

struct Loaded {
  LoadedModel lm;
  data::Dataset dataset;
};

Loaded open(const std::string& ckpt, const std::string& data_dir) {
  Loaded l{load_model(ckpt), data::load_dataset(data_dir)};
  if (!(l.lm.vocab == l.dataset.vocab)) throw std::invalid_argument("checkpoint vocabulary does not match the dataset in " + data_dir);
  return l;
}

int gen_data(const std::string& out, std::size_t n_train, std::size_t n_val, std::size_t n_test, std::uint64_t seed, bool force) {
  require(n_train > 0 && n_val > 0 && n_test > 0, "--train, --val and --test must be positive");
  const std::filesystem::path root(out);
  if (std::filesystem::exists(root) && !std::filesystem::is_empty(root)) {
    require(force, out + " is not empty (use --force to overwrite)");
    std::filesystem::remove_all(root);
  }
  data::write_dataset(data::build_dataset(n_train, n_val, n_test, seed), root);
  return ok;
}

struct TrainArgs {
  std::string data, out, mode = "embed_only", profile = "full", init_i2t, init_t2i;
  std::optional<std::size_t> epochs, batch, word_dim, hidden_dim, joint_dim, decoder_hidden, max_len, cond_dim, z_dim;
  std::optional<double> lr, generative_lr, margin, lambda, beta_f, beta_w, beta_s, gamma_start, gamma_end, dropout;
  std::uint64_t seed = 0;
  bool abs_preprocess = false, normalize = false, no_cond_augment = false, non_saturating = false, length_penalty = false;
};

int train(const TrainArgs& a) {
  TrainConfig cfg;
  require(a.profile == "full" || a.profile == "desk", "unknown --profile '" + a.profile + "' (valid: full, desk)");
  if (a.profile == "desk") cfg = desk_profile(cfg);
  try {
    cfg.mode = parse_train_mode(a.mode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  cfg.seed = a.seed;
  auto set = [](auto& field, const auto& opt) {
    if (opt) field = *opt;
  };
  set(cfg.epochs, a.epochs);
  set(cfg.batch_size, a.batch);
  set(cfg.word_dim, a.word_dim);
  set(cfg.hidden_dim, a.hidden_dim);
  set(cfg.joint_dim, a.joint_dim);
  set(cfg.decoder_hidden_dim, a.decoder_hidden);
  set(cfg.max_decode_len, a.max_len);
  set(cfg.cond_dim, a.cond_dim);
  set(cfg.z_dim, a.z_dim);
  set(cfg.learning_rate, a.lr);
  if (a.generative_lr) cfg.generative_learning_rate = a.generative_lr;
  set(cfg.margin, a.margin);
  set(cfg.lambda, a.lambda);
  set(cfg.beta_f, a.beta_f);
  set(cfg.beta_w, a.beta_w);
  set(cfg.beta_s, a.beta_s);
  set(cfg.gamma_start, a.gamma_start);
  set(cfg.gamma_end, a.gamma_end);
  set(cfg.image_dropout, a.dropout);
  cfg.abs_preprocess = cfg.abs_preprocess || a.abs_preprocess;
  cfg.normalize_embeddings = cfg.normalize_embeddings || a.normalize;
  cfg.cond_augment = !a.no_cond_augment;
  cfg.non_saturating = a.non_saturating;
  cfg.cider_length_penalty = a.length_penalty;
  try {
    validate(cfg);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  require(a.init_i2t.empty() == a.init_t2i.empty(), "--init-i2t and --init-t2i go together");
  require(a.init_i2t.empty() || cfg.mode == TrainMode::i2t_t2i, "--init-i2t/--init-t2i apply to mode i2t_t2i only");

  const auto dataset = data::load_dataset(a.data);
  const auto train_images = data::ImageBank::load(dataset.train, a.data);
  const auto val_images = data::ImageBank::load(dataset.val, a.data);
  Trainer trainer(cfg, dataset, train_images, val_images);
  if (!a.init_i2t.empty()) trainer.init_from(a.init_i2t, a.init_t2i);
  trainer.train(a.out);
  const auto& last = trainer.log().back();
  std::printf("epoch %zu Sum %.2f best %.2f\n", last.epoch, last.sum, trainer.best_sum());
  return ok;
}

int eval(const std::string& ckpt, const std::string& data_dir, const std::string& split_tag, const std::string& out) {
  auto l = open(ckpt, data_dir);
  const auto& split = l.dataset.split(split_tag);
  const auto bank = data::ImageBank::load(split, data_dir);
  const auto caps = encode_captions(split, l.dataset.vocab);
  const auto r = evaluate_retrieval(l.lm.model.embed, bank, caps, l.lm.config.lambda, l.lm.config.eval_chunk);

  // Caption quality of the k-th retrieved caption of every image query against its own references.
  std::vector<TokenSeq> flat;
  for (const auto& c : caps) flat.insert(flat.end(), c.begin(), c.end());
  const CorpusStats stats(caps);
  std::vector<CaptionQualityRow> quality(5);
  for (std::size_t k = 0; k < 5; ++k) quality[k].rank_no = k + 1;
  for (std::size_t i = 0; i < caps.size(); ++i) {
    const auto order = ranked_columns(r.scores.col(static_cast<Eigen::Index>(i)).transpose());
    for (std::size_t k = 0; k < 5 && k < order.size(); ++k) {
      const auto& cand = flat[order[k]];
      for (std::size_t n = 1; n <= 4; ++n) quality[k].bleu[n - 1] += bleu_n(cand, caps[i], n).score;
      quality[k].cider += cider(cand, caps[i], stats);
    }
  }
  for (auto& q : quality) {
    for (auto& b : q.bleu) b /= static_cast<double>(caps.size());
    q.cider /= static_cast<double>(caps.size());
  }

  const std::filesystem::path dir(out);
  std::filesystem::create_directories(dir);
  std::ofstream rs(dir / "retrieval.csv");
  write_retrieval_csv(rs, {{to_string(l.lm.config.mode), split_tag, r.i2t, r.t2i}});
  std::ofstream qs(dir / "caption_quality.csv");
  write_caption_quality_csv(qs, quality);
  std::ofstream ss(dir / "scores.tsv");
  write_score_matrix(ss, r.scores);
  if (!rs || !qs || !ss) throw std::runtime_error("cannot write results under " + out);
  std::printf("%s i2t R@1 %.2f R@10 %.2f t2i R@1 %.2f R@10 %.2f Sum %.2f\n", split_tag.c_str(), r.i2t.r1, r.i2t.r10, r.t2i.r1, r.t2i.r10, r.sum);
  return ok;
}

int retrieve(const std::string& ckpt, const std::string& data_dir, const std::string& split_tag, const std::string& query, const std::string& image,
             std::size_t k) {
  require(query.empty() != image.empty(), "give exactly one of --query and --image");
  require(k > 0, "--k must be positive");
  auto l = open(ckpt, data_dir);
  auto& embed = l.lm.model.embed;
  const auto& split = l.dataset.split(split_tag);
  const double lambda = l.lm.config.lambda;
  NoGradGuard g;
  Eigen::RowVectorXd scores;
  std::vector<std::string> ids;
  if (!query.empty()) {
    const auto tokens = l.dataset.vocab.encode(data::split_words(query));
    require(!tokens.empty(), "--query is empty");
    const auto bank = data::ImageBank::load(split, data_dir);
    scores = score_matrix(embed.embed_captions(std::vector<TokenSeq>{tokens}), embed_bank(embed, bank), lambda).row(0);
    for (const auto& item : split.items) ids.push_back(item.id);
  } else {
    const auto img = embed.embed_images(data::to_tensor(data::read_ppm(image)), nn::Mode::eval);
    std::vector<TokenSeq> flat;
    for (const auto& item : split.items) {
      for (std::size_t c = 0; c < item.captions.size(); ++c) {
        flat.push_back(l.dataset.vocab.encode(item.captions[c]));
        ids.push_back(item.id + "-" + std::to_string(c) + "\t" + data::join_words(item.captions[c]));
      }
    }
    scores = score_matrix(embed.embed_captions(flat), img, lambda).col(0).transpose();
  }
  if (k > ids.size()) {
    std::fprintf(stderr, "warning: --k %zu exceeds the %zu candidates; showing all\n", k, ids.size());
    k = ids.size();
  }
  const auto order = ranked_columns(scores);
  for (std::size_t r = 0; r < k; ++r) std::printf("%zu\t%s\t%.17g\n", r + 1, ids[order[r]].c_str(), scores[static_cast<Eigen::Index>(order[r])]);
  return ok;
}

int sample_caption(const std::string& ckpt, const std::string& data_dir, const std::string& split_tag, const std::string& out) {
  auto l = open(ckpt, data_dir);
  auto& m = l.lm.model;
  const auto& split = l.dataset.split(split_tag);
  const auto bank = data::ImageBank::load(split, data_dir);
  std::ofstream file;
  if (!out.empty()) file.open(out);
  std::ostream& os = out.empty() ? std::cout : file;
  os << "id\tcaption\n";
  NoGradGuard g;
  for (std::size_t start = 0; start < bank.size(); start += 100) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(bank.size(), start + 100); ++i) idx.push_back(i);
    const auto v_l = m.embed.embed_images_low(bank.batch(idx), nn::Mode::eval);
    const auto d = m.captioner.decode(m.embed.words, v_l, DecodeMode::greedy);
    for (std::size_t j = 0; j < idx.size(); ++j) os << split.items[idx[j]].id << '\t' << data::join_words(l.dataset.vocab.decode(d.tokens[j])) << '\n';
  }
  if (!os) throw std::runtime_error("cannot write " + out);
  return ok;
}

int sample_image(const std::string& ckpt, const std::string& data_dir, const std::string& split_tag, const std::string& out, std::size_t num,
                 std::size_t limit, std::uint64_t seed) {
  require(num > 0, "--num must be positive");
  auto l = open(ckpt, data_dir);
  auto& m = l.lm.model;
  const auto& split = l.dataset.split(split_tag);
  std::filesystem::create_directories(out);
  Rng rng(seed);
  NoGradGuard g;
  const auto items = std::min(limit, split.items.size());
  for (std::size_t i = 0; i < items; ++i) {
    const auto& item = split.items[i];
    for (std::size_t c = 0; c < item.captions.size(); ++c) {
      const std::vector<TokenSeq> caption(num, l.dataset.vocab.encode(item.captions[c]));
      const auto t_l = m.embed.embed_captions_low(caption);
      const auto cond = m.gan.cond.sample(t_l, &rng);
      const auto fake = m.gan.generator.generate(sample_noise(num, m.gan.config.z_dim, rng), cond.t_c, nn::Mode::eval);
      for (std::size_t n = 0; n < num; ++n) {
        const auto pixels = static_cast<Eigen::Index>(fake.size() / num);
        const auto one = Tensor::constant({1, fake.dim(1), fake.dim(2), 3}, fake.values().segment(static_cast<Eigen::Index>(n) * pixels, pixels));
        data::write_ppm(std::filesystem::path(out) / (item.id + "-" + std::to_string(c) + "_" + std::to_string(n) + ".ppm"), data::from_tensor(one));
      }
    }
  }
  return ok;
}

int export_embeddings(const std::string& ckpt, const std::string& out) {
  auto lm = load_model(ckpt);
  const auto& w = lm.model.embed.words.weight;
  std::ofstream file;
  if (!out.empty()) file.open(out);
  std::ostream& os = out.empty() ? std::cout : file;
  const auto dim = w.dim(1);
  char buf[32];
  for (std::size_t r = 0; r < w.dim(0); ++r) {
    os << lm.vocab.token(r);
    for (std::size_t c = 0; c < dim; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", w.values()[static_cast<Eigen::Index>(r * dim + c)]);
      os << '\t' << buf;
    }
    os << '\n';
  }
  if (!os) throw std::runtime_error("cannot write " + out);
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GXN cross-modal retrieval on the shapes dataset"};
  app.require_subcommand(1, 1);

  std::string out, data_dir, ckpt, split = "test", query, image;
  std::size_t n_train = 2000, n_val = 200, n_test = 200, k = 5, num = 1, limit = 10;
  std::uint64_t seed = 0;
  bool force = false;

  auto* gen = app.add_subcommand("gen-data", "Generate the shapes dataset");
  gen->add_option("--out", out, "Dataset directory")->required();
  gen->add_option("--train", n_train, "Training items");
  gen->add_option("--val", n_val, "Validation items");
  gen->add_option("--test", n_test, "Test items");
  gen->add_option("--seed", seed, "Scene sampling seed");
  gen->add_flag("--force", force, "Replace a non-empty directory");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train one of the ablation modes");
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  tr->add_option("--out", ta.out, "Run directory")->required();
  tr->add_option("--mode", ta.mode, "embed_only, i2t_xe, i2t_mix, t2i or i2t_t2i");
  tr->add_option("--profile", ta.profile, "full (default widths) or desk (reduced widths, unit-norm embeddings, lr 1e-3 and generative lr 2e-4)");
  tr->add_option("--seed", ta.seed, "Initialization and batching seed");
  tr->add_option("--init-i2t", ta.init_i2t, "i2t_mix checkpoint for mode i2t_t2i");
  tr->add_option("--init-t2i", ta.init_t2i, "t2i checkpoint for mode i2t_t2i");
  tr->add_option("--epochs", ta.epochs);
  tr->add_option("--batch-size", ta.batch);
  tr->add_option("--lr", ta.lr);
  tr->add_option("--generative-lr", ta.generative_lr, "Rate of the caption and GAN updates (default: --lr)");
  tr->add_option("--margin", ta.margin);
  tr->add_option("--lambda", ta.lambda, "Weight of the abstract branch score");
  tr->add_option("--beta-f", ta.beta_f);
  tr->add_option("--beta-w", ta.beta_w);
  tr->add_option("--beta-s", ta.beta_s);
  tr->add_option("--gamma-start", ta.gamma_start);
  tr->add_option("--gamma-end", ta.gamma_end);
  tr->add_option("--dropout", ta.dropout);
  tr->add_option("--word-dim", ta.word_dim);
  tr->add_option("--hidden-dim", ta.hidden_dim);
  tr->add_option("--joint-dim", ta.joint_dim);
  tr->add_option("--decoder-hidden-dim", ta.decoder_hidden);
  tr->add_option("--max-decode-len", ta.max_len);
  tr->add_option("--cond-dim", ta.cond_dim);
  tr->add_option("--z-dim", ta.z_dim);
  tr->add_flag("--abs-preprocess", ta.abs_preprocess, "Absolute value of embeddings before scoring");
  tr->add_flag("--normalize", ta.normalize, "Unit-normalize embeddings before scoring");
  tr->add_flag("--no-cond-augment", ta.no_cond_augment, "Deterministic text conditioning");
  tr->add_flag("--non-saturating", ta.non_saturating, "Non-saturating generator loss");
  tr->add_flag("--cider-length-penalty", ta.length_penalty, "Gaussian length penalty in the reward");

  auto* ev = app.add_subcommand("eval", "Retrieval and caption-quality metrics");
  ev->add_option("--ckpt", ckpt)->required();
  ev->add_option("--data", data_dir)->required();
  ev->add_option("--split", split, "train, val or test");
  ev->add_option("--out", out, "Directory for retrieval.csv, caption_quality.csv and scores.tsv")->required();

  auto* rt = app.add_subcommand("retrieve", "Rank images for a caption or captions for an image");
  rt->add_option("--ckpt", ckpt)->required();
  rt->add_option("--data", data_dir)->required();
  rt->add_option("--split", split);
  rt->add_option("--query", query, "Caption text");
  rt->add_option("--image", image, "P6 image path");
  rt->add_option("--k", k);

  auto* sc = app.add_subcommand("sample-caption", "Greedy captions for every image of a split");
  sc->add_option("--ckpt", ckpt)->required();
  sc->add_option("--data", data_dir)->required();
  sc->add_option("--split", split);
  sc->add_option("--out", out, "TSV path (standard output when absent)");

  auto* si = app.add_subcommand("sample-image", "Generated images for the captions of a split");
  si->add_option("--ckpt", ckpt)->required();
  si->add_option("--data", data_dir)->required();
  si->add_option("--split", split);
  si->add_option("--out", out)->required();
  si->add_option("--num", num, "Images per caption");
  si->add_option("--limit", limit, "Items of the split to draw from");
  si->add_option("--seed", seed);

  auto* ex = app.add_subcommand("export-embeddings", "Dump the word embedding table");
  ex->add_option("--ckpt", ckpt)->required();
  ex->add_option("--out", out, "Path (standard output when absent)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return e.get_exit_code() == 0 ? app.exit(e) : (app.exit(e), usage);
  }

  try {
    if (*gen) return gen_data(out, n_train, n_val, n_test, seed, force);
    if (*tr) return train(ta);
    if (*ev) return eval(ckpt, data_dir, split, out);
    if (*rt) return retrieve(ckpt, data_dir, split, query, image, k);
    if (*sc) return sample_caption(ckpt, data_dir, split, out);
    if (*si) return sample_image(ckpt, data_dir, split, out, num, limit, seed);
    if (*ex) return export_embeddings(ckpt, out);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "gxn: %s\n", e.what());
    return usage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "gxn: numeric failure: %s\n", e.what());
    return numeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "gxn: %s\n", e.what());
    return data_error;
  }
  return usage;
}
