//! Webhook sink for administrator notifications.

use std::sync::mpsc::{self, Sender};
use std::thread;

use edgetier::scheduler::{Notification, Notifier};

/// POSTs each notification as JSON to a URL from a background thread, so
/// a slow receiver never stalls the scheduler. Delivery is best effort.
pub struct WebhookNotifier {
    tx: Sender<Notification>,
}

impl WebhookNotifier {
    pub fn new(url: impl Into<String>) -> Self {
        let url = url.into();
        let (tx, rx) = mpsc::channel::<Notification>();
        thread::spawn(move || {
            let http = reqwest::blocking::Client::new();
            for n in rx {
                match http.post(&url).json(&n).send() {
                    Ok(resp) if !resp.status().is_success() => {
                        log::warn!("webhook {url} answered {} for {}", resp.status(), n.task_id)
                    }
                    Ok(_) => {}
                    Err(e) => log::warn!("webhook {url} unreachable: {e}"),
                }
            }
        });
        Self { tx }
    }
}

impl Notifier for WebhookNotifier {
    fn notify(&self, n: &Notification) {
        let _ = self.tx.send(n.clone());
    }
}
