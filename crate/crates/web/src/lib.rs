//! Browser bindings. Each export returns JSON so the page needs no glue
//! beyond `JSON.parse`.
// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use microgrid_core::engine::{run, steady_state, Scenario};
use microgrid_core::inner_control::{control_set, quantization_error};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Longest simulation the page may request, in seconds.
pub const MAX_DURATION: f64 = 4.0;

#[derive(Debug, Serialize)]
pub struct IbrView {
    pub p_w: f64,
    pub q_var: f64,
    pub v_v: f64,
    pub delta_rad: f64,
}

#[derive(Debug, Serialize)]
pub struct OracleView {
    pub frequency_hz: f64,
    pub ibrs: Vec<IbrView>,
    pub load_w: f64,
    pub losses_w: f64,
}

#[derive(Debug, Serialize)]
pub struct QuantizationView {
    pub epsilon_v: f64,
    pub analytic_v: f64,
    /// Distinct bridge vectors as `[d, q]` pairs.
    pub vectors: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize)]
pub struct TraceView {
    pub time_s: Vec<f64>,
    /// Per inverter, one series each.
    pub p_w: Vec<Vec<f64>>,
    pub f_hz: Vec<Vec<f64>>,
    pub v_v: Vec<Vec<f64>>,
}

/// The built-in scenario with the droop slope of inverters 2 and up scaled
/// by `mp_ratio`.
fn scenario(mp_ratio: f64) -> Result<Scenario, String> {
    if !(mp_ratio > 0.0 && mp_ratio.is_finite()) {
        return Err(format!("droop ratio must be positive, got {mp_ratio}"));
    }
    let mut sc = Scenario::reference();
    for d in sc.droop.iter_mut().skip(1) {
        d.m_p *= mp_ratio;
    }
    Ok(sc)
}

pub fn oracle(mp_ratio: f64, loads: &[bool]) -> Result<OracleView, String> {
    let sc = scenario(mp_ratio)?;
    if loads.len() != sc.loads.len() {
        return Err(format!("expected {} load flags", sc.loads.len()));
    }
    let op = steady_state(&sc, loads).map_err(|e| e.to_string())?;
    Ok(OracleView {
        frequency_hz: op.frequency_hz(),
        ibrs: op.ibrs.iter().map(|o| IbrView { p_w: o.p, q_var: o.q, v_v: o.v, delta_rad: o.delta }).collect(),
        load_w: op.load_power,
        losses_w: op.total_losses(),
    })
}

pub fn quantization(v_dc: f64, resolution: f64) -> Result<QuantizationView, String> {
    if !(v_dc > 0.0 && resolution > 0.0) {
        return Err("V_dc and resolution must be positive".into());
    }
    if v_dc / resolution > 5000.0 {
        return Err("resolution too fine for this V_dc".into());
    }
    let set = control_set(v_dc, 0.0);
    Ok(QuantizationView {
        epsilon_v: quantization_error(&set, resolution),
        analytic_v: 2.0 * v_dc / (3.0 * 3f64.sqrt()),
        vectors: set.distinct_vectors(1e-9).iter().map(|u| [u.d, u.q]).collect(),
    })
}

pub fn trace(duration: f64, mp_ratio: f64, load_step: bool) -> Result<TraceView, String> {
    if !(duration > 0.0 && duration <= MAX_DURATION) {
        return Err(format!("duration must lie in (0, {MAX_DURATION}] s"));
    }
    let mut sc = scenario(mp_ratio)?;
    sc.duration = duration;
    if !load_step {
        sc.loads.retain(|l| l.t_on <= 0.0 && l.t_off.is_infinite());
    }
    let log = run(&sc).map_err(|e| e.to_string())?;
    let n = log.n_ibrs();
    let series = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..log.records.len()).map(|k| f(k, i)).collect()).collect()
    };
    Ok(TraceView {
        time_s: log.records.iter().map(|r| r.time).collect(),
        p_w: series(&|k, i| log.records[k].ibrs[i].p),
        f_hz: series(&|k, i| log.records[k].ibrs[i].freq_hz),
        v_v: series(&|k, i| log.records[k].ibrs[i].v_dq.norm()),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

/// Steady state for the given droop ratio; `loads` holds one 0/1 flag per load.
#[wasm_bindgen(js_name = steadyState)]
pub fn steady_state_js(mp_ratio: f64, loads: Vec<u8>) -> Result<String, JsValue> {
    let flags: Vec<bool> = loads.iter().map(|&b| b != 0).collect();
    to_js(oracle(mp_ratio, &flags))
}

#[wasm_bindgen(js_name = quantizationError)]
pub fn quantization_error_js(v_dc: f64, resolution: f64) -> Result<String, JsValue> {
    to_js(quantization(v_dc, resolution))
}

#[wasm_bindgen(js_name = simulate)]
pub fn simulate_js(duration: f64, mp_ratio: f64, load_step: bool) -> Result<String, JsValue> {
    to_js(trace(duration, mp_ratio, load_step))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_follows_the_droop_ratio() {
        let v = oracle(2.0, &[true, true, true, false]).unwrap();
        let ratio = v.ibrs[0].p_w / v.ibrs[1].p_w;
        assert!((ratio - 2.0).abs() < 1e-6, "{ratio}");
        assert!(v.frequency_hz < 50.0);
        assert!(oracle(1.0, &[true]).is_err());
        assert!(oracle(-1.0, &[true; 4]).is_err());
    }

    #[test]
    fn quantization_matches_the_hexagon() {
        let q = quantization(600.0, 1.0).unwrap();
        assert_eq!(q.vectors.len(), 7);
        assert!((q.epsilon_v / q.analytic_v - 1.0).abs() < 0.01);
        assert!(quantization(600.0, 0.01).is_err());
    }

    #[test]
    fn short_trace_without_step() {
        let t = trace(0.05, 1.0, false).unwrap();
        assert_eq!(t.time_s.len(), 50);
        assert_eq!(t.p_w.len(), 3);
        assert!(t.v_v[2].iter().all(|v| (v - 311.0).abs() < 20.0));
        assert!(trace(10.0, 1.0, true).is_err());
        assert!(serde_json::to_string(&t).unwrap().contains("\"f_hz\""));
    }
}
