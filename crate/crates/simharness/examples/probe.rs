use bcse_sim::config::parse_scenario;
use bcse_sim::runner::*;
use std::time::Instant;

fn desk(scheme: &str, snr: f64, reinit: &str, trials: usize) -> String {
    format!(
        "[gsm]\nk=8\nn=1\nt=128\nt_p=3\nrho=0.2\n[channel]\nm=64\nm_prime=64\nlambda=0.1\n\
         [estimator]\nscheme={scheme}\ni_max=10\nj_max=150\nrestarts=5\nreinit={reinit}\ndamping=0.4\n\
         [run]\nsnr_db={snr}\ntrials={trials}\nmaster_seed=7\n"
    )
}

fn sb(scheme: &str, snr: f64, trials: usize) -> String {
    let k: String = std::env::var("PROBE_K").unwrap_or("3".into());
    let n: String = std::env::var("PROBE_N").unwrap_or("8".into());
    let m: String = std::env::var("PROBE_M").unwrap_or("64".into());
    let d: String = std::env::var("PROBE_DAMP").unwrap_or("0.4".into());
    let jm: String = std::env::var("PROBE_JMAX").unwrap_or("150".into());
    let im: String = std::env::var("PROBE_IMAX").unwrap_or("10".into());
    let rs: String = std::env::var("PROBE_RESTARTS").unwrap_or("5".into());
    let rho: String = std::env::var("PROBE_RHO").unwrap_or("0.3".into());
    let fl: String = std::env::var("PROBE_FLOOR").unwrap_or("0".into());
    format!(
        "[gsm]\nk={k}\nn={n}\nt=100\nt_p=8\nrho={rho}\n[channel]\nm={m}\nm_prime={m}\nn_prime=8\nlambda=0.1\n\
         [estimator]\nscheme={scheme}\ni_max={im}\nj_max={jm}\nrestarts={rs}\nreinit=v\ndamping={d}\nsigma2_floor={fl}\n\
         [run]\nsnr_db={snr}\ntrials={trials}\nmaster_seed=7\n"
    )
}

fn dft(scheme: &str, trials: usize) -> String {
    let k: String = std::env::var("PROBE_K").unwrap_or("8".into());
    let t: String = std::env::var("PROBE_T").unwrap_or("128".into());
    let rho: String = std::env::var("PROBE_RHO").unwrap_or("0.2".into());
    let d: String = std::env::var("PROBE_DAMP").unwrap_or("0.4".into());
    let jm: String = std::env::var("PROBE_JMAX").unwrap_or("150".into());
    let im: String = std::env::var("PROBE_IMAX").unwrap_or("10".into());
    let g: String = std::env::var("PROBE_GRID").unwrap_or("perturbed".into());
    let f: String = std::env::var("PROBE_FLOOR").unwrap_or("0".into());
    format!(
        "[gsm]\nk={k}\nn=1\nt={t}\nt_p=4\nrho={rho}\n[channel]\nm=64\nm_prime=64\nlambda=0.1\ngrid={g}\n\
         [estimator]\nscheme={scheme}\ni_max={im}\nj_max={jm}\nrestarts=5\nreinit=v\ndamping={d}\nsigma2_floor={f}\n\
         [run]\nsnr_db=30\ntrials={trials}\nmaster_seed=7\n"
    )
}

fn run(name: &str, text: &str) {
    let t0 = Instant::now();
    let s = parse_scenario(text).unwrap();
    let rows = run_scenario_trials(&s);
    let bers: Vec<f64> = rows.iter().map(|r| r.ber).collect();
    let mean = bers.iter().sum::<f64>() / bers.len() as f64;
    let mut sorted = bers.clone();
    sorted.sort_by(f64::total_cmp);
    let med = sorted[sorted.len() / 2];
    let succ = bers.iter().filter(|&&b| b < 1e-3).count();
    println!(
        "{name}: mean {mean:.5} median {med:.5} succ {succ}/{} {:.1}s",
        bers.len(),
        t0.elapsed().as_secs_f64()
    );
    if std::env::var("PROBE_ROWS").is_ok() {
        for r in &rows {
            println!(
                "  trial {} ber {:.4} res {:.3e} it {} {}",
                r.trial, r.ber, r.residual, r.iterations, r.status
            );
        }
    }
}

fn main() {
    let which: Vec<String> = std::env::args().skip(1).collect();
    let all = which.is_empty();
    let has = |k: &str| all || which.iter().any(|w| w == k);
    if has("c6") {
        run("c6 v@15", &desk("bcse", 15.0, "v", 10));
        run("c6 i@15", &desk("bcse", 15.0, "i", 10));
    }
    if has("c7") {
        run("c7 sbcse@15", &sb("sbcse", 15.0, 3));
        run("c7 bcse@15", &sb("bcse", 15.0, 3));
        run("c7 sbcse@20", &sb("sbcse", 20.0, 6));
        run("c7 bcse@20", &sb("bcse", 20.0, 6));
    }
    if has("genie") {
        run("genie-S@40", &sb("genie-S", 40.0, 3));
        run("genie-X@40", &sb("genie-X", 40.0, 3));
    }
    if has("diag") {
        let s = parse_scenario(&sb("bcse", 20.0, 1)).unwrap();
        let (r, art) = run_trial_full(&s, 0);
        println!("ber {} residual {:.3e} status {}", r.ber, r.residual, r.status);
        let a = art.unwrap();
        let tp = 8;
        for u in 0..a.x.nrows() {
            let wrong = (tp..a.x.ncols())
                .filter(|&t| (a.x_hat[[u, t]] - a.x[[u, t]]).norm() > 1e-1)
                .count();
            let sn: f64 = (0..a.s_hat.nrows()).map(|q| a.s_hat[[q, u]].norm_sqr()).sum();
            let st = 0.0f64;
            let _ = (wrong, sn, st);
            // oracle row matching: correlate estimated row u against every
            // true row over the data block
            let tt = a.x.ncols();
            let mut best = (0usize, 0.0f64);
            let mut self_c = 0.0f64;
            for v in 0..a.x.nrows() {
                let mut c = bcse_core::Complex64::new(0.0, 0.0);
                let mut n1 = 0.0;
                let mut n2 = 0.0;
                for t in tp..tt {
                    c += a.x_hat[[u, t]] * a.x[[v, t]].conj();
                    n1 += a.x_hat[[u, t]].norm_sqr();
                    n2 += a.x[[v, t]].norm_sqr();
                }
                let cn = c.norm() / (n1 * n2).sqrt().max(1e-30);
                if v == u {
                    self_c = cn;
                }
                if cn > best.1 {
                    best = (v, cn);
                }
            }
            println!(
                "row {u}: wrong {wrong}/{} best-match row {} corr {:.3} (self {:.3})",
                tt - tp,
                best.0,
                best.1,
                self_c
            );
        }
    }
    if has("c12") {
        run("c12 dft@30", &dft("dft-bigamp", 10));
        run("c12 bcse@30", &dft("bcse", 10));
    }
}
