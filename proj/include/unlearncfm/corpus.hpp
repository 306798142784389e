#pragma once

// Synthetic multi-speaker corpus with a closed-form generative process.
//
// Every frame is  C * E[token] + S * style + noise, where C and S occupy
// disjoint coordinate blocks of R^D. Speaker identity and content are
// therefore exactly recoverable by linear projection (see metrics.hpp).

#include "core.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace unlearncfm {

enum class Split : std::uint8_t { Remain = 0, Forget = 1, Unseen = 2 };

inline std::string_view split_name(Split s) {
    switch (s) {
        case Split::Remain: return "remain";
        case Split::Forget: return "forget";
        case Split::Unseen: return "unseen";
    }
    return "?";
}

struct CorpusSpec {
    int n_remain = 32;
    int n_forget = 4;
    int n_unseen = 8;
    int utts_min = 8;   // per speaker, inclusive
    int utts_max = 14;
    int eval_per_speaker = 2;
    int t_min = 24;
    int t_max = 48;
    int vocab = 16;
    int d_content = 8;
    int d_speaker = 8;
    double sigma_data = 0.05;
    double style_std = 0.5;
    int run_min = 2;  // frames per token run
    int run_max = 5;
    std::uint64_t seed = 7;

    int dim() const { return d_content + d_speaker; }

    void validate() const {
        auto pos = [](int v, const char* name) {
            require(v > 0, ErrorKind::InvalidArgument, std::string("corpus spec: ") + name + " must be positive");
        };
        pos(n_remain, "n_remain");
        pos(n_forget, "n_forget");
        pos(n_unseen, "n_unseen");
        pos(utts_min, "utts_min");
        pos(vocab, "vocab");
        pos(d_content, "d_content");
        pos(d_speaker, "d_speaker");
        pos(run_min, "run_min");
        require(utts_max >= utts_min, ErrorKind::InvalidArgument, "corpus spec: utts_max < utts_min");
        require(eval_per_speaker >= 2, ErrorKind::InvalidArgument, "corpus spec: eval_per_speaker must be >= 2");
        require(utts_min >= eval_per_speaker + 1, ErrorKind::InvalidArgument,
                "corpus spec: utts_min must leave at least one training utterance");
        require(t_min >= 2 && t_max >= t_min, ErrorKind::InvalidArgument, "corpus spec: need 2 <= t_min <= t_max");
        require(run_max >= run_min, ErrorKind::InvalidArgument, "corpus spec: run_max < run_min");
        require(vocab <= 65535, ErrorKind::InvalidArgument, "corpus spec: vocab must fit in u16");
        require(sigma_data >= 0.0 && std::isfinite(sigma_data), ErrorKind::InvalidArgument,
                "corpus spec: sigma_data must be finite and >= 0");
        require(style_std > 0.0, ErrorKind::InvalidArgument, "corpus spec: style_std must be positive");
    }
};

struct Speaker {
    std::uint32_t id = 0;
    Split split = Split::Remain;
    Vector style;
};

struct Utterance {
    std::uint32_t id = 0;
    std::uint32_t speaker = 0;
    bool eval = false;  // held out from every training stage
    TokenSeq content;
    Matrix frames;      // T x D

    Eigen::Index length() const { return frames.rows(); }
};

/// Prompt cut from the head of an utterance. The rest of the utterance is
/// the masked region a model would have to generate.
struct Prompt {
    Matrix frames;
    TokenSeq content;
};

class Corpus {
public:
    CorpusSpec spec;
    Matrix content_basis;  // C: D x d_c
    Matrix speaker_basis;  // S: D x d_s
    Matrix embeddings;     // E: V x d_c, unit rows
    std::vector<Speaker> speakers;
    std::vector<Utterance> utterances;

    int dim() const { return static_cast<int>(content_basis.rows()); }
    int vocab() const { return static_cast<int>(embeddings.rows()); }
    int d_content() const { return static_cast<int>(content_basis.cols()); }
    int d_speaker() const { return static_cast<int>(speaker_basis.cols()); }

    const Speaker& speaker(std::uint32_t id) const { return speakers.at(id); }
    Split split_of(std::uint32_t speaker_id) const { return speakers.at(speaker_id).split; }

    std::vector<std::uint32_t> speakers_in(Split s) const {
        std::vector<std::uint32_t> out;
        for (const auto& sp : speakers)
            if (sp.split == s) out.push_back(sp.id);
        return out;
    }

    /// Training utterances (eval holdout excluded) of speakers in the given splits.
    std::vector<std::uint32_t> train_utterances(std::initializer_list<Split> splits) const {
        std::vector<std::uint32_t> out;
        for (const auto& u : utterances) {
            if (u.eval) continue;
            Split s = split_of(u.speaker);
            if (std::find(splits.begin(), splits.end(), s) != splits.end()) out.push_back(u.id);
        }
        return out;
    }

    std::vector<std::uint32_t> eval_utterances(Split s) const {
        std::vector<std::uint32_t> out;
        for (const auto& u : utterances)
            if (u.eval && split_of(u.speaker) == s) out.push_back(u.id);
        return out;
    }

    std::vector<std::uint32_t> utterances_of(std::uint32_t speaker_id, bool eval_only) const {
        std::vector<std::uint32_t> out;
        for (const auto& u : utterances)
            if (u.speaker == speaker_id && (!eval_only || u.eval)) out.push_back(u.id);
        return out;
    }
};

// ---------------------------------------------------------------------------

/// frame_t = C E[token_t] + S style + eps_t,  eps_t ~ N(0, sigma^2 I).
inline Matrix render_frames(const TokenSeq& content, const Vector& style, const Corpus& corpus, double sigma_data,
                            std::uint64_t noise_seed) {
    require(style.size() == corpus.d_speaker(), ErrorKind::ShapeMismatch, "render: style dimension mismatch");
    const auto T = static_cast<Eigen::Index>(content.size());
    Matrix coords(T, corpus.d_content());
    for (Eigen::Index t = 0; t < T; ++t) {
        require(content[t] < corpus.vocab(), ErrorKind::InvalidArgument,
                "render: token " + std::to_string(content[t]) + " out of vocabulary");
        coords.row(t) = corpus.embeddings.row(content[t]);
    }
    Matrix frames = coords * corpus.content_basis.transpose();
    const Eigen::RowVectorXd spk = (corpus.speaker_basis * style).transpose();
    frames.rowwise() += spk;
    if (sigma_data > 0.0) {
        Rng rng(noise_seed);
        frames += gaussian_matrix(rng, T, corpus.dim(), sigma_data);
    }
    return frames;
}

inline Matrix render_frames(const TokenSeq& content, const Vector& style, const Corpus& corpus, std::uint64_t noise_seed) {
    return render_frames(content, style, corpus, corpus.spec.sigma_data, noise_seed);
}

namespace detail {

inline Matrix random_orthogonal(Rng& rng, int n) {
    Matrix g = gaussian_matrix(rng, n, n);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ();
    // Fix column signs so the factorization is unique.
    Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < n; ++j)
        if (r(j, j) < 0) q.col(j) *= -1.0;
    return q;
}

inline Matrix content_table(Rng& rng, int vocab, int d) {
    constexpr double min_gap = 0.1;
    Matrix e(vocab, d);
    for (int k = 0; k < vocab; ++k) {
        for (int attempt = 0;; ++attempt) {
            require(attempt < 10000, ErrorKind::InvalidArgument, "corpus: cannot place distinct content embeddings");
            Vector v = gaussian_matrix(rng, d, 1).col(0);
            double n = v.norm();
            if (n < 1e-12) continue;
            v /= n;
            bool ok = true;
            for (int j = 0; j < k && ok; ++j) ok = (e.row(j).transpose() - v).norm() >= min_gap;
            if (ok) {
                e.row(k) = v.transpose();
                break;
            }
        }
    }
    return e;
}

inline Vector voice_style(Rng& rng, int d, double stddev) {
    // Rejection keeps every norm in [0.5, 2.0]; rescale after many misses.
    for (int attempt = 0; attempt < 64; ++attempt) {
        Vector v = gaussian_matrix(rng, d, 1, stddev).col(0);
        double n = v.norm();
        if (n >= 0.5 && n <= 2.0) return v;
    }
    Vector v = gaussian_matrix(rng, d, 1).col(0);
    return v / v.norm() * 1.0;
}

inline TokenSeq content_sequence(Rng& rng, const CorpusSpec& spec) {
    const int T = spec.t_min + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(spec.t_max - spec.t_min + 1)));
    TokenSeq seq;
    seq.reserve(static_cast<std::size_t>(T));
    while (static_cast<int>(seq.size()) < T) {
        auto tok = static_cast<Token>(uniform_index(rng, static_cast<std::size_t>(spec.vocab)));
        int run = spec.run_min + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(spec.run_max - spec.run_min + 1)));
        for (int i = 0; i < run && static_cast<int>(seq.size()) < T; ++i) seq.push_back(tok);
    }
    return seq;
}

/// Lower/upper quartile by nearest rank.
inline std::pair<int, int> quartiles(std::vector<int> v) {
    std::sort(v.begin(), v.end());
    auto at = [&](double q) {
        auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()))) ;
        idx = std::clamp<std::size_t>(idx, 1, v.size());
        return v[idx - 1];
    };
    return {at(0.25), at(0.75)};
}

}  // namespace detail

inline Corpus generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    Corpus c;
    c.spec = spec;
    const int D = spec.dim();

    Rng basis_rng(derive_seed(spec.seed, "corpus/basis"));
    c.content_basis = Matrix::Zero(D, spec.d_content);
    c.speaker_basis = Matrix::Zero(D, spec.d_speaker);
    c.content_basis.topRows(spec.d_content) = detail::random_orthogonal(basis_rng, spec.d_content);
    c.speaker_basis.bottomRows(spec.d_speaker) = detail::random_orthogonal(basis_rng, spec.d_speaker);
    c.embeddings = detail::content_table(basis_rng, spec.vocab, spec.d_content);

    const int n_pool = spec.n_remain + spec.n_forget;
    const int n_total = n_pool + spec.n_unseen;
    Rng spk_rng(derive_seed(spec.seed, "corpus/speakers"));
    std::vector<int> counts(static_cast<std::size_t>(n_total));
    for (int s = 0; s < n_total; ++s) {
        Speaker sp;
        sp.id = static_cast<std::uint32_t>(s);
        sp.split = s < n_pool ? Split::Remain : Split::Unseen;
        sp.style = detail::voice_style(spk_rng, spec.d_speaker, spec.style_std);
        c.speakers.push_back(std::move(sp));
        counts[static_cast<std::size_t>(s)] =
            spec.utts_min + static_cast<int>(uniform_index(spk_rng, static_cast<std::size_t>(spec.utts_max - spec.utts_min + 1)));
    }

    // Forget speakers: uniform draw from the interquartile band of utterance
    // counts, topped up by distance to the band when it is too small.
    {
        std::vector<int> pool_counts(counts.begin(), counts.begin() + n_pool);
        auto [q1, q3] = detail::quartiles(pool_counts);
        std::vector<std::uint32_t> order(static_cast<std::size_t>(n_pool));
        std::iota(order.begin(), order.end(), 0u);
        Rng split_rng(derive_seed(spec.seed, "corpus/split"));
        std::shuffle(order.begin(), order.end(), split_rng);
        auto band_distance = [&](std::uint32_t s) {
            int n = counts[s];
            return n < q1 ? q1 - n : (n > q3 ? n - q3 : 0);
        };
        std::stable_sort(order.begin(), order.end(),
                         [&](std::uint32_t a, std::uint32_t b) { return band_distance(a) < band_distance(b); });
        for (int i = 0; i < spec.n_forget; ++i) c.speakers[order[static_cast<std::size_t>(i)]].split = Split::Forget;
    }

    std::uint32_t utt_id = 0;
    for (int s = 0; s < n_total; ++s) {
        Rng content_rng(derive_seed(spec.seed, "corpus/content", static_cast<std::uint64_t>(s)));
        const int n = counts[static_cast<std::size_t>(s)];
        const bool unseen = c.speakers[static_cast<std::size_t>(s)].split == Split::Unseen;
        for (int k = 0; k < n; ++k) {
            Utterance u;
            u.id = utt_id++;
            u.speaker = static_cast<std::uint32_t>(s);
            u.eval = unseen || k >= n - spec.eval_per_speaker;
            u.content = detail::content_sequence(content_rng, spec);
            u.frames = render_frames(u.content, c.speakers[static_cast<std::size_t>(s)].style, c, spec.sigma_data,
                                     derive_seed(spec.seed, "corpus/noise", u.id));
            c.utterances.push_back(std::move(u));
        }
    }
    return c;
}

/// Keeps `k` of the current forget speakers (uniform draw) and moves the
/// others to the remain split. Frames are untouched, so a model pretrained
/// on the parent corpus stays valid.
inline Corpus with_forget_subset(const Corpus& corpus, int k, std::uint64_t seed) {
    auto forget = corpus.speakers_in(Split::Forget);
    require(k > 0 && k <= static_cast<int>(forget.size()), ErrorKind::InvalidArgument,
            "forget subset size must be in [1, n_forget]");
    Rng rng(derive_seed(seed, "corpus/forget-subset"));
    std::shuffle(forget.begin(), forget.end(), rng);
    Corpus out = corpus;
    for (std::size_t i = static_cast<std::size_t>(k); i < forget.size(); ++i) out.speakers[forget[i]].split = Split::Remain;
    out.spec.n_forget = k;
    out.spec.n_remain = corpus.spec.n_remain + static_cast<int>(forget.size()) - k;
    return out;
}

/// Head-of-utterance prompt of `prompt_len` frames.
inline Prompt make_prompt(const Utterance& utt, int prompt_len) {
    require(prompt_len > 0 && prompt_len < utt.length(), ErrorKind::InvalidArgument,
            "make_prompt: need 0 < prompt_len < T (T=" + std::to_string(utt.length()) + ")");
    Prompt p;
    p.frames = utt.frames.topRows(prompt_len);
    p.content.assign(utt.content.begin(), utt.content.begin() + prompt_len);
    return p;
}

// ---------------------------------------------------------------------------
// Persistence

inline constexpr std::string_view kCorpusMagic = "UNLCFM-CORPUS";
inline constexpr std::uint32_t kCorpusVersion = 1;

inline void write_corpus(std::ostream& os, const Corpus& c) {
    const auto& s = c.spec;
    io::put_magic(os, kCorpusMagic);
    io::put<std::uint32_t>(os, kCorpusVersion);
    for (int v : {s.n_remain, s.n_forget, s.n_unseen, s.utts_min, s.utts_max, s.eval_per_speaker, s.t_min, s.t_max,
                  s.vocab, s.d_content, s.d_speaker, s.run_min, s.run_max})
        io::put<std::uint32_t>(os, static_cast<std::uint32_t>(v));
    io::put<double>(os, s.sigma_data);
    io::put<double>(os, s.style_std);
    io::put<std::uint64_t>(os, s.seed);
    io::put_matrix(os, c.content_basis);
    io::put_matrix(os, c.speaker_basis);
    io::put_matrix(os, c.embeddings);
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(c.speakers.size()));
    for (const auto& sp : c.speakers) {
        io::put<std::uint32_t>(os, sp.id);
        io::put<std::uint8_t>(os, static_cast<std::uint8_t>(sp.split));
        io::put_vector(os, sp.style);
    }
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(c.utterances.size()));
    for (const auto& u : c.utterances) {
        io::put<std::uint32_t>(os, u.id);
        io::put<std::uint32_t>(os, u.speaker);
        io::put<std::uint8_t>(os, u.eval ? 1 : 0);
        io::put<std::uint32_t>(os, static_cast<std::uint32_t>(u.content.size()));
        for (Token t : u.content) io::put<std::uint16_t>(os, t);
        io::put_matrix(os, u.frames);
    }
}

inline Corpus read_corpus(std::istream& is) {
    io::expect_magic(is, kCorpusMagic);
    auto version = io::get<std::uint32_t>(is);
    require(version == kCorpusVersion, ErrorKind::Format, "unsupported corpus version " + std::to_string(version));
    Corpus c;
    auto& s = c.spec;
    for (int* v : {&s.n_remain, &s.n_forget, &s.n_unseen, &s.utts_min, &s.utts_max, &s.eval_per_speaker, &s.t_min,
                   &s.t_max, &s.vocab, &s.d_content, &s.d_speaker, &s.run_min, &s.run_max})
        *v = static_cast<int>(io::get<std::uint32_t>(is));
    s.sigma_data = io::get<double>(is);
    s.style_std = io::get<double>(is);
    s.seed = io::get<std::uint64_t>(is);
    c.content_basis = io::get_matrix(is);
    c.speaker_basis = io::get_matrix(is);
    c.embeddings = io::get_matrix(is);
    const int D = s.dim();
    require(c.content_basis.rows() == D && c.content_basis.cols() == s.d_content && c.speaker_basis.rows() == D &&
                c.speaker_basis.cols() == s.d_speaker && c.embeddings.rows() == s.vocab &&
                c.embeddings.cols() == s.d_content,
            ErrorKind::Format, "corpus: matrix dimensions disagree with header");
    auto n_spk = io::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_spk; ++i) {
        Speaker sp;
        sp.id = io::get<std::uint32_t>(is);
        auto split = io::get<std::uint8_t>(is);
        require(split <= 2 && sp.id == i, ErrorKind::Format, "corpus: bad speaker record");
        sp.split = static_cast<Split>(split);
        sp.style = io::get_vector(is);
        c.speakers.push_back(std::move(sp));
    }
    auto n_utt = io::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_utt; ++i) {
        Utterance u;
        u.id = io::get<std::uint32_t>(is);
        u.speaker = io::get<std::uint32_t>(is);
        u.eval = io::get<std::uint8_t>(is) != 0;
        auto T = io::get<std::uint32_t>(is);
        require(T < (1u << 20), ErrorKind::Format, "corpus: utterance too long");
        u.content.resize(T);
        for (auto& t : u.content) t = io::get<std::uint16_t>(is);
        u.frames = io::get_matrix(is);
        require(u.id == i && u.speaker < n_spk && u.frames.rows() == T && u.frames.cols() == D, ErrorKind::Format,
                "corpus: bad utterance record " + std::to_string(i));
        c.utterances.push_back(std::move(u));
    }
    return c;
}

inline std::string corpus_bytes(const Corpus& c) {
    std::ostringstream os(std::ios::binary);
    write_corpus(os, c);
    return os.str();
}

inline void save_corpus(const std::string& path, const Corpus& c) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::Io, "cannot open " + path + " for writing");
    write_corpus(os, c);
    require(static_cast<bool>(os), ErrorKind::Io, "write failed: " + path);
}

inline Corpus load_corpus(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorKind::Io, "cannot open corpus " + path);
    return read_corpus(is);
}

/// Human-readable key=value manifest of splits and counts.
inline std::string corpus_manifest(const Corpus& c) {
    std::ostringstream os;
    os << "format=UNLCFM-CORPUS\n";
    os << "version=" << kCorpusVersion << "\n";
    os << "seed=" << c.spec.seed << "\n";
    os << "dim=" << c.dim() << "\n";
    os << "d_content=" << c.d_content() << "\n";
    os << "d_speaker=" << c.d_speaker() << "\n";
    os << "vocab=" << c.vocab() << "\n";
    os << "sigma_data=" << c.spec.sigma_data << "\n";
    os << "speakers=" << c.speakers.size() << "\n";
    os << "utterances=" << c.utterances.size() << "\n";
    for (Split s : {Split::Remain, Split::Forget, Split::Unseen}) {
        auto ids = c.speakers_in(s);
        os << "split." << split_name(s) << ".count=" << ids.size() << "\n";
        os << "split." << split_name(s) << ".speakers=";
        for (std::size_t i = 0; i < ids.size(); ++i) os << (i ? "," : "") << ids[i];
        os << "\n";
    }
    for (const auto& sp : c.speakers) {
        int n = 0, e = 0;
        for (const auto& u : c.utterances)
            if (u.speaker == sp.id) {
                ++n;
                e += u.eval ? 1 : 0;
            }
        os << "speaker." << sp.id << "=" << split_name(sp.split) << ",utts=" << n << ",eval=" << e << "\n";
    }
    return os.str();
}

}  // namespace unlearncfm
