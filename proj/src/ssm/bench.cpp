#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>

#include "tkmamba/random.hpp"
#include "tkmamba/ssm.hpp"

namespace tkm {

namespace {

using clock_type = std::chrono::steady_clock;

volatile double g_sink = 0.0;

double elapsed_ms(clock_type::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock_type::now() - t0).count();
}

// One timed kernel. A sample runs `batch` back-to-back calls (at least ~10 ms)
// and records the per-call average.
struct Timed {
    std::function<void()> fn;
    std::size_t batch = 1;
    std::vector<double> samples;

    void calibrate() {
        std::size_t calls = 0;
        const auto t0 = clock_type::now();
        do {
            fn();
            ++calls;
        } while (elapsed_ms(t0) < 30.0);
        batch = static_cast<std::size_t>(std::max(1.0, std::ceil(10.0 / (elapsed_ms(t0) / calls))));
    }
    void sample() {
        const auto t0 = clock_type::now();
        for (std::size_t i = 0; i < batch; ++i) fn();
        samples.push_back(elapsed_ms(t0) / static_cast<double>(batch));
    }
    double median() {
        std::nth_element(samples.begin(), samples.begin() + samples.size() / 2, samples.end());
        return samples[samples.size() / 2];
    }
};

struct Problem {
    std::size_t L;
    std::vector<double> u, delta, A, Bm, Cm, Ds, y, q, k, v;
    SelectiveScanArgs<double> args;
};

}  // namespace

std::vector<ScanBenchRow> bench_scan(const std::vector<std::size_t>& lengths, const ScanBenchOptions& options) {
    const std::size_t D = options.channels, N = options.state;
    std::vector<Problem> problems(lengths.size());
    std::vector<Timed> timers;
    for (std::size_t j = 0; j < lengths.size(); ++j) {
        Problem& p = problems[j];
        const std::size_t L = p.L = lengths[j];
        Rng rng(mix_seed(options.seed, L));
        p.u.resize(L * D);
        p.delta.resize(L * D);
        p.A.resize(D * N);
        p.Bm.resize(L * N);
        p.Cm.resize(L * N);
        p.Ds.assign(D, 1.0);
        p.y.resize(L * D);
        for (auto& x : p.u) x = rng.normal();
        for (auto& x : p.delta) x = 0.001 + 0.1 * rng.uniform();
        for (std::size_t i = 0; i < p.A.size(); ++i) p.A[i] = -static_cast<double>(i % N + 1);
        for (auto& x : p.Bm) x = rng.normal();
        for (auto& x : p.Cm) x = rng.normal();
        p.args = {1, L, D, N, p.u.data(), p.delta.data(), p.A.data(), p.Bm.data(), p.Cm.data(), p.Ds.data(),
                  ZohMode::Simplified};
        // causal similarity accumulation over one lane: y_t = sum_{s<=t} (q_t k_s) v_s
        p.q.resize(L);
        p.k.resize(L);
        p.v.resize(L);
        for (std::size_t t = 0; t < L; ++t) {
            p.q[t] = p.Bm[t * N];
            p.k[t] = p.Cm[t * N];
            p.v[t] = p.u[t * D];
        }
    }
    for (auto& p : problems) {
        timers.push_back({[&p] {
            selective_scan_sequential(p.args, p.y.data());
            g_sink = g_sink + p.y.back();
        }});
        timers.push_back({[&p] {
            selective_scan_parallel(p.args, p.y.data());
            g_sink = g_sink + p.y.back();
        }});
        if (options.quadratic) {
            timers.push_back({[&p] {
                double total = 0.0;
                for (std::size_t t = 0; t < p.L; ++t) {
                    double acc = 0.0;
                    for (std::size_t s = 0; s <= t; ++s) acc += p.q[t] * p.k[s] * p.v[s];
                    total += acc;
                }
                g_sink = g_sink + total;
            }});
        }
    }
    for (auto& t : timers) t.calibrate();
    // round-robin so a burst of machine noise lands on one sample of every
    // kernel rather than on every sample of one kernel
    for (std::size_t r = 0; r < std::max<std::size_t>(options.repeats, 1); ++r)
        for (auto& t : timers) t.sample();

    const std::size_t per = options.quadratic ? 3 : 2;
    std::vector<ScanBenchRow> rows;
    for (std::size_t j = 0; j < problems.size(); ++j) {
        ScanBenchRow row;
        row.length = problems[j].L;
        row.sequential_ms = timers[j * per].median();
        row.parallel_ms = timers[j * per + 1].median();
        if (options.quadratic) row.quadratic_ms = timers[j * per + 2].median();
        rows.push_back(row);
    }
    return rows;
}

}  // namespace tkm
