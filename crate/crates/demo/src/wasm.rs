use serde::de::DeserializeOwned;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn call<P: DeserializeOwned, R: Serialize>(
    params: &str,
    f: impl FnOnce(&P) -> call_core::Result<R>,
) -> Result<String, JsError> {
    let p: P = serde_json::from_str(params)?;
    let out = f(&p).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(serde_json::to_string(&out)?)
}

#[wasm_bindgen(js_name = groupBatch)]
pub fn group_batch(params: &str) -> Result<String, JsError> {
    call(params, crate::group_batch)
}

#[wasm_bindgen(js_name = loadTimelines)]
pub fn load_timelines(params: &str) -> Result<String, JsError> {
    call(params, crate::load_timelines)
}

#[wasm_bindgen(js_name = policyHits)]
pub fn policy_hits(params: &str) -> Result<String, JsError> {
    call(params, crate::policy_hits)
}

#[wasm_bindgen(js_name = randomSizes)]
pub fn random_sizes(n: usize, seed: u32) -> Vec<f64> {
    crate::random_sizes(n, seed as u64)
}
