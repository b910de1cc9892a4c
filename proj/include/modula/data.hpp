#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "modula/rng.hpp"

namespace modula {

/// Token conventions shared by the generators and the harness: 0 pads,
/// 1 separates prompt from answer, markers and payload slices come from
/// each task's spec.
constexpr int kPadToken = 0;
constexpr int kSepToken = 1;

enum class GenKind { copy, reverse, modular_add, sort, parity };

inline const char* gen_kind_name(GenKind k) {
    switch (k) {
        case GenKind::copy: return "copy";
        case GenKind::reverse: return "reverse";
        case GenKind::modular_add: return "modular_add";
        case GenKind::sort: return "sort";
        case GenKind::parity: return "parity";
    }
    return "?";
}

inline GenKind gen_kind_from(const std::string& s) {
    if (s == "copy") return GenKind::copy;
    if (s == "reverse") return GenKind::reverse;
    if (s == "modular_add") return GenKind::modular_add;
    if (s == "sort") return GenKind::sort;
    if (s == "parity") return GenKind::parity;
    throw std::invalid_argument("unknown generator kind: " + s);
}

/// One synthetic domain task. Payload tokens are drawn uniformly from
/// [vocab_lo, vocab_hi); every example is prefixed by the task's unique
/// marker token. max_len bounds |input| + |target| (0 disables the check).
struct TaskSpec {
    std::string id;
    GenKind kind = GenKind::copy;
    int marker = 2;
    int vocab_lo = 8;
    int vocab_hi = 24;
    int sample_count = 2048;
    int payload_len = 5;
    uint64_t seed = 0;
    int max_len = 0;
    int stage2_epochs = 0;  // per-domain override; 0 = use the stage-2 optimizer setting

    void validate() const {
        if (id.empty()) throw std::invalid_argument("task spec: empty id");
        if (marker < 0) throw std::invalid_argument("task " + id + ": negative marker token");
        if (vocab_lo >= vocab_hi)
            throw std::invalid_argument("task " + id + ": empty vocabulary slice");
        if (sample_count < 1) throw std::invalid_argument("task " + id + ": sample count must be >= 1");
        if (payload_len < 1) throw std::invalid_argument("task " + id + ": payload length must be >= 1");
        if (kind == GenKind::modular_add && vocab_hi - vocab_lo < 10)
            throw std::invalid_argument("task " + id + ": modular_add needs a slice of at least 10 tokens");
        if (kind == GenKind::parity && vocab_hi - vocab_lo < 2)
            throw std::invalid_argument("task " + id + ": parity needs a slice of at least 2 tokens");
    }
};

/// input = [marker, payload..., SEP]; target = answer tokens. Loss is
/// only defined over answer positions; the prompt is masked.
struct Example {
    std::vector<int> input;
    std::vector<int> target;
    std::string task_id;

    int length() const { return static_cast<int>(input.size() + target.size()); }

    bool operator==(const Example& o) const {
        return input == o.input && target == o.target && task_id == o.task_id;
    }
};

/// Deterministic per-task example stream; generate() and universal_mix()
/// are both built on it.
class ExampleStream {
public:
    ExampleStream(TaskSpec spec, uint64_t seed) : spec_(std::move(spec)), rng_(seed) { spec_.validate(); }

    Example next() {
        Example ex;
        ex.task_id = spec_.id;
        std::vector<int> payload(static_cast<size_t>(spec_.payload_len));
        for (int& t : payload) t = spec_.vocab_lo + rng_.uniform_int(spec_.vocab_hi - spec_.vocab_lo);
        ex.input.reserve(payload.size() + 2);
        ex.input.push_back(spec_.marker);
        ex.input.insert(ex.input.end(), payload.begin(), payload.end());
        ex.input.push_back(kSepToken);
        ex.target = answer_for(spec_, payload);
        if (spec_.max_len > 0 && ex.length() > spec_.max_len)
            throw std::invalid_argument("task " + spec_.id + ": sequence length " +
                                        std::to_string(ex.length()) + " would exceed max length " +
                                        std::to_string(spec_.max_len));
        return ex;
    }

    static std::vector<int> answer_for(const TaskSpec& spec, const std::vector<int>& payload) {
        switch (spec.kind) {
            case GenKind::copy:
                return payload;
            case GenKind::reverse: {
                std::vector<int> r(payload.rbegin(), payload.rend());
                return r;
            }
            case GenKind::sort: {
                std::vector<int> r = payload;
                std::sort(r.begin(), r.end());
                return r;
            }
            case GenKind::modular_add: {
                // payload tokens encode digits lo+0 .. lo+9; the answer is
                // their sum mod 10, as a single token.
                int s = 0;
                for (int t : payload) s += (t - spec.vocab_lo) % 10;
                return {spec.vocab_lo + s % 10};
            }
            case GenKind::parity: {
                // per-token even/odd classification within the slice
                std::vector<int> r;
                r.reserve(payload.size());
                for (int t : payload) r.push_back(spec.vocab_lo + (t - spec.vocab_lo) % 2);
                return r;
            }
        }
        throw std::logic_error("unreachable generator kind");
    }

private:
    TaskSpec spec_;
    Rng rng_;
};

/// All examples of a task, fully determined by the spec.
inline std::vector<Example> generate(const TaskSpec& spec) {
    ExampleStream stream(spec, spec.seed);
    std::vector<Example> out;
    out.reserve(static_cast<size_t>(spec.sample_count));
    for (int i = 0; i < spec.sample_count; ++i) out.push_back(stream.next());
    return out;
}

/// Held-out split for a task: drawn from a separate seed stream and kept
/// disjoint from the training set (and duplicate-free) by rejection.
inline std::vector<Example> generate_eval(const TaskSpec& spec, int eval_samples) {
    if (eval_samples < 1) throw std::invalid_argument("eval sample count must be >= 1");
    std::vector<Example> train = generate(spec);
    auto key = [](const Example& e) {
        std::string k;
        for (int t : e.input) k += std::to_string(t) + ",";
        return k;
    };
    std::vector<std::string> seen;
    seen.reserve(train.size());
    for (const auto& e : train) seen.push_back(key(e));
    std::sort(seen.begin(), seen.end());
    auto in_train = [&](const std::string& k) {
        return std::binary_search(seen.begin(), seen.end(), k);
    };

    ExampleStream stream(spec, derive_seed(spec.seed, "eval-split", spec.id));
    std::vector<Example> out;
    std::vector<std::string> taken;
    int guard = 0;
    while (static_cast<int>(out.size()) < eval_samples) {
        if (++guard > eval_samples * 1000)
            throw std::runtime_error("task " + spec.id + ": cannot build a disjoint held-out split; "
                                     "the payload space is too small");
        Example ex = stream.next();
        std::string k = key(ex);
        if (in_train(k)) continue;
        if (std::find(taken.begin(), taken.end(), k) != taken.end()) continue;
        taken.push_back(k);
        out.push_back(std::move(ex));
    }
    return out;
}

/// Uniform interleave over the given tasks: n draws, each picking a task
/// uniformly at random and pulling the next example from that task's
/// mix stream, then a deterministic shuffle. Mix streams are seeded
/// independently of the tasks' own training sets.
inline std::vector<Example> universal_mix(const std::vector<TaskSpec>& specs, uint64_t seed, int n) {
    if (specs.empty()) throw std::invalid_argument("universal_mix: no task specs");
    if (n < 1) throw std::invalid_argument("universal_mix: n must be >= 1");
    std::vector<ExampleStream> streams;
    streams.reserve(specs.size());
    for (const auto& s : specs) streams.emplace_back(s, derive_seed(seed, "mix", s.id));
    Rng rng(derive_seed(seed, "mix-draws"));
    std::vector<Example> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(streams[static_cast<size_t>(rng.uniform_int(static_cast<int>(specs.size())))].next());
    Rng shuffle_rng(derive_seed(seed, "mix-shuffle"));
    shuffle_rng.shuffle(out);
    return out;
}

/// A right-padded minibatch. mask[b][i] == 1 exactly when position i's
/// next-token prediction is scored, i.e. token i+1 belongs to example
/// b's answer. Pad and prompt positions carry mask 0.
struct Batch {
    std::vector<std::vector<int>> tokens;
    std::vector<std::vector<int>> targets;     // tokens shifted left by one, pad at the end
    std::vector<std::vector<double>> mask;
    std::vector<std::string> task_ids;

    int rows() const { return static_cast<int>(tokens.size()); }
    int width() const { return tokens.empty() ? 0 : static_cast<int>(tokens[0].size()); }
};

inline void fill_row(Batch& b, const Example& ex, int width) {
    std::vector<int> seq = ex.input;
    seq.insert(seq.end(), ex.target.begin(), ex.target.end());
    int len = static_cast<int>(seq.size());
    std::vector<int> toks(static_cast<size_t>(width), kPadToken);
    std::vector<int> tgts(static_cast<size_t>(width), kPadToken);
    std::vector<double> msk(static_cast<size_t>(width), 0.0);
    for (int i = 0; i < len; ++i) toks[static_cast<size_t>(i)] = seq[static_cast<size_t>(i)];
    for (int i = 0; i + 1 < len; ++i) tgts[static_cast<size_t>(i)] = seq[static_cast<size_t>(i) + 1];
    int first = static_cast<int>(ex.input.size()) - 1;  // predicts the first answer token
    for (int i = first; i + 1 < len; ++i) msk[static_cast<size_t>(i)] = 1.0;
    b.tokens.push_back(std::move(toks));
    b.targets.push_back(std::move(tgts));
    b.mask.push_back(std::move(msk));
    b.task_ids.push_back(ex.task_id);
}

/// Splits examples into batches in order; the last partial batch is
/// kept. Each batch is padded to its own longest sequence.
inline std::vector<Batch> batch(const std::vector<Example>& examples, int batch_size) {
    if (examples.empty()) throw std::invalid_argument("batch: empty example list");
    if (batch_size < 1) throw std::invalid_argument("batch: batch size must be >= 1");
    std::vector<Batch> out;
    for (size_t start = 0; start < examples.size(); start += static_cast<size_t>(batch_size)) {
        size_t end = std::min(examples.size(), start + static_cast<size_t>(batch_size));
        int width = 0;
        for (size_t i = start; i < end; ++i) width = std::max(width, examples[i].length());
        Batch b;
        for (size_t i = start; i < end; ++i) fill_row(b, examples[i], width);
        out.push_back(std::move(b));
    }
    return out;
}

/// Line format: task_id<TAB>input tokens<TAB>target tokens, tokens as
/// space-separated integers.
inline std::string example_to_line(const Example& ex) {
    std::string line = ex.task_id;
    line += '\t';
    for (size_t i = 0; i < ex.input.size(); ++i) {
        if (i) line += ' ';
        line += std::to_string(ex.input[i]);
    }
    line += '\t';
    for (size_t i = 0; i < ex.target.size(); ++i) {
        if (i) line += ' ';
        line += std::to_string(ex.target[i]);
    }
    return line;
}

inline Example example_from_line(const std::string& line) {
    size_t t1 = line.find('\t');
    size_t t2 = line.find('\t', t1 == std::string::npos ? 0 : t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
        throw std::invalid_argument("dataset line must have three tab-separated fields");
    Example ex;
    ex.task_id = line.substr(0, t1);
    auto parse_tokens = [](const std::string& s) {
        std::vector<int> out;
        size_t pos = 0;
        while (pos < s.size()) {
            size_t next = s.find(' ', pos);
            if (next == std::string::npos) next = s.size();
            if (next > pos) out.push_back(std::stoi(s.substr(pos, next - pos)));
            pos = next + 1;
        }
        return out;
    };
    ex.input = parse_tokens(line.substr(t1 + 1, t2 - t1 - 1));
    ex.target = parse_tokens(line.substr(t2 + 1));
    return ex;
}

}  // namespace modula
